"""Shared fixtures.  Heavy objects (projects, laws, closed-loop runs) are
built once per session; tests must not mutate them."""

from importlib import resources

import numpy as np
import pytest

from flatlin.config import parse_config
from flatlin.feedback import synthesize
from flatlin.flatness import enumerate_kappa
from flatlin.project import Project
from flatlin.sim import flat_side_rollout, plan_rest_to_rest, simulate_closed_loop

ACCEPTANCE_LINES = []


def builtin_text(name):
    return resources.files("flatlin.data").joinpath(f"{name}.cfg").read_text()


@pytest.fixture(scope="session")
def manipulator():
    return Project("builtin:manipulator")


@pytest.fixture(scope="session")
def toy():
    return Project("builtin:toy")


@pytest.fixture(scope="session")
def pendulum():
    return Project("builtin:pendulum")


@pytest.fixture(scope="session")
def candidates(manipulator):
    return enumerate_kappa(manipulator.gen_map, manipulator.y_s)


def _pick(cands, kappa):
    return next(c for c in cands if tuple(c.kappa) == kappa)


@pytest.fixture(scope="session")
def law1(manipulator, candidates):
    return synthesize(manipulator.gen_map, _pick(candidates, (2, 2, 2)), manipulator.y_s)


@pytest.fixture(scope="session")
def law2(manipulator, candidates):
    return synthesize(manipulator.gen_map, _pick(candidates, (0, 2, 4)), manipulator.y_s)


@pytest.fixture(scope="session")
def transition(manipulator):
    """The default 5 s rest-to-rest reference of the built-in scenario."""
    cfg = manipulator.cfg
    y0 = cfg.equilibria[cfg.scenario["from"]]
    y1 = cfg.equilibria[cfg.scenario["to"]]
    return plan_rest_to_rest(manipulator.gen_map, y0, y1, 5.0)


@pytest.fixture(scope="session")
def rollout(manipulator, transition):
    return flat_side_rollout(manipulator.gen_map, None, transition, dt=1e-3)


@pytest.fixture(scope="session")
def run1(manipulator, law1, transition):
    return simulate_closed_loop(manipulator.gen, law1, transition, dt=1e-3)


@pytest.fixture(scope="session")
def run2(manipulator, law2, transition):
    return simulate_closed_loop(manipulator.gen, law2, transition, dt=1e-3)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def config_text():
    return builtin_text


@pytest.fixture
def make_project():
    def make(text):
        return Project(parse_config(text))
    return make


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
