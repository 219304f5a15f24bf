import hashlib
import json
import logging
import re

import numpy as np
import pytest

from flatlin import cli
from flatlin.config import parse_config
from flatlin.errors import ConvergenceError


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def run_json(capsys, *argv):
    code, out, err = run(capsys, *argv, "--json")
    assert code == 0, err
    return json.loads(out)


def _numbers(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _numbers(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _numbers(v)
    elif isinstance(obj, float):
        yield obj


# -- analyze ------------------------------------------------------------------------------

def test_analyze_manipulator(capsys):
    rep = run_json(capsys, "analyze", "builtin:manipulator")
    g = rep["generalized"]
    assert g["R_tilde"] == [4, 4, 4] and g["S_tilde"] == [4, 4, 4]
    assert rep["R"] == [4, 4, 4]
    jac = np.array(rep["equilibrium_jacobian"]["dFq_tilde/dy"])
    assert np.max(np.abs(jac - np.eye(3))) <= 1e-9
    assert rep["lemma1"]["passed"]


def test_text_and_json_carry_the_same_numbers(capsys):
    rep = run_json(capsys, "analyze", "builtin:manipulator")
    code, text, _ = run(capsys, "analyze", "builtin:manipulator")
    assert code == 0
    in_text = {float(s) for s in re.findall(r"-?\d+\.\d+(?:e[-+]?\d+)?", text)}
    assert set(_numbers(rep)) <= in_text


def test_non_symmetric_metric_names_entry(capsys, config_text, tmp_path):
    text = config_text("toy").replace('metric[2,2] = "1"',
                                      'metric[2,2] = "1"\nmetric[2,1] = "2 + cos(b)"')
    path = tmp_path / "bad.cfg"
    path.write_text(text)
    code, _, err = run(capsys, "analyze", str(path))
    assert code == 2
    assert "[1,2]" in err or "[2,1]" in err


def test_malformed_config_reports_path(capsys, config_text, tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text(config_text("toy").replace('y2 = "b"', 'y2 = "b +"'))
    code, _, err = run(capsys, "analyze", str(path))
    assert code == 2 and "flat" in err


def test_missing_config_file(capsys, tmp_path):
    code, _, err = run(capsys, "analyze", str(tmp_path / "nope.cfg"))
    assert code == 2 and err.startswith("error:")


# -- kappa -----------------------------------------------------------------------------

def test_kappa_table(capsys):
    rep = run_json(capsys, "kappa", "builtin:manipulator")
    rows = rep["candidates"]
    assert [r["kappa"] for r in rows if r["case"] == "i"] == [[2, 2, 2]]
    witness = [r for r in rows if r["kappa"] == [0, 2, 4]]
    assert len(witness) == 1 and witness[0]["case"] == "ii"
    assert all(r["sigma_min_eq"] > 0 and r["sigma_min_ball"] > 0 for r in rows)


def test_toy_has_one_candidate(capsys):
    rows = run_json(capsys, "kappa", "builtin:toy")["candidates"]
    assert [(r["kappa"], r["case"]) for r in rows] == [([2, 2], "i")]


def test_empty_table_is_a_condition_failure(capsys, monkeypatch):
    monkeypatch.setattr(cli, "enumerate_kappa", lambda *a, **k: [])
    code, _, err = run(capsys, "kappa", "builtin:toy")
    assert code == 3 and "no admissible" in err


def test_reports_are_deterministic(capsys):
    a = run(capsys, "kappa", "builtin:manipulator", "--json")[1]
    b = run(capsys, "kappa", "builtin:manipulator", "--json")[1]
    assert a == b


# -- synthesize / simulate ----------------------------------------------------------------

def test_synthesize_signature(capsys):
    rep = run_json(capsys, "synthesize", "builtin:manipulator", "--kappa", "0,2,4")
    assert rep["w_slots"] == [5, 3, 1]
    assert rep["independent_of"] == ["z_e", "v_ze"]


def test_unknown_selector_lists_valid_ones(capsys):
    code, _, err = run(capsys, "simulate", "builtin:toy", "--kappa", "7")
    assert code == 2 and "1 = (2,2)" in err


def test_simulate_toy_writes_artifacts(capsys, tmp_path):
    out = tmp_path / "run"
    rep = run_json(capsys, "simulate", "builtin:toy", "--kappa", "1", "--T", "1.0",
                   "--out", str(out))
    assert rep["linearization"]["passed"] and rep["final_state_error"] <= 1e-6
    manifest = json.loads((out / "manifest.json").read_text())
    names = {f["path"] for f in manifest["files"]}
    assert {"closed_loop.csv", "closed_loop.gp", "rollout.csv", "report.json",
            "effective.cfg"} <= names
    for f in manifest["files"]:
        data = (out / f["path"]).read_bytes()
        assert hashlib.sha256(data).hexdigest() == f["sha256"] and len(data) == f["bytes"]
    assert json.loads((out / "report.json").read_text()) == rep


def test_simulate_is_bit_identical(capsys):
    argv = ("simulate", "builtin:pendulum", "--T", "0.5", "--seed", "3", "--json")
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_zero_length_transition(capsys, tmp_path):
    out = tmp_path / "still"
    rep = run_json(capsys, "simulate", "builtin:toy", "--from", "down", "--to", "down",
                   "--T", "0.5", "--out", str(out))
    assert rep["linearization"]["passed"] and rep["final_state_error"] == 0.0
    rows = np.loadtxt(out / "closed_loop.csv", delimiter=",", skiprows=1)
    assert np.ptp(rows[:, 1:], axis=0).max() == 0.0


def test_manipulator_short_run(capsys):
    rep = run_json(capsys, "simulate", "builtin:manipulator", "--kappa", "2,2,2",
                   "--T", "1")
    assert rep["max_psi_residual"] <= 1e-10 and rep["linearization"]["passed"]
    assert rep["max_deviation_from_rollout"] <= 1e-6


def test_differencing_strategy_refused_for_high_gain_law(capsys):
    code, _, err = run(capsys, "simulate", "builtin:manipulator", "--kappa", "0,2,4",
                       "--T", "0.2", "--strategy", "B")
    assert code == 4 and "loop gain" in err


def test_solver_failure_is_numeric(capsys, monkeypatch):
    def boom(*a, **k):
        raise ConvergenceError("no convergence", residual=1.0)
    monkeypatch.setattr(cli, "simulate_closed_loop", boom)
    code, _, err = run(capsys, "simulate", "builtin:toy", "--T", "0.5")
    assert code == 4 and "no convergence" in err


@pytest.mark.parametrize("argv", [
    ("simulate", "builtin:toy", "--T", "-1"),
    ("simulate", "builtin:toy", "--T", "0"),
    ("simulate", "builtin:toy", "--dt", "0"),
    ("plan", "builtin:toy", "--from", "nowhere"),
])
def test_bad_arguments(capsys, argv):
    assert run(capsys, *argv)[0] == 2


# -- plan / outputs ---------------------------------------------------------------------------

def test_plan(capsys, tmp_path):
    out = tmp_path / "plan"
    rep = run_json(capsys, "plan", "builtin:manipulator", "--from", "rest", "--to", "rest",
                   "--T", "1", "--out", str(out))
    assert rep["max_dynamics_residual"] <= 1e-9
    assert np.array_equal(rep["start_state"], rep["end_state"])
    assert (out / "plan.csv").exists() and (out / "plan.gp").exists()


def test_effective_config_round_trips(capsys, tmp_path, config_text):
    out = tmp_path / "a"
    run_json(capsys, "analyze", "builtin:manipulator", "--out", str(out))
    again = parse_config((out / "effective.cfg").read_text())
    assert again.summary() == parse_config(config_text("manipulator")).summary()


def test_log_level_from_environment(capsys, monkeypatch):
    monkeypatch.setenv("FLATLIN_LOG_LEVEL", "DEBUG")
    root = logging.getLogger()
    saved = (root.level, list(root.handlers))
    root.handlers.clear()
    try:
        assert run(capsys, "kappa", "builtin:toy")[0] == 0
        assert logging.getLogger("flatlin").getEffectiveLevel() == logging.DEBUG
    finally:
        root.handlers[:] = saved[1]
        root.setLevel(saved[0])
