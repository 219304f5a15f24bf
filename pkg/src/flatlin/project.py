"""Assemble the full pipeline (system, flat map, promotion) from a config."""

import logging
from functools import cached_property

from .config import ProjectConfig, load_config
from .flatness import build_flat_map, restrict_to_generalized
from .jets import make_equilibrium
from .mechanics import LagrangianSystem, euler_lagrange, promote

log = logging.getLogger(__name__)


class Project:
    """Lazily built models derived from one :class:`ProjectConfig`."""

    def __init__(self, cfg):
        if not isinstance(cfg, ProjectConfig):
            cfg = load_config(cfg)
        self.cfg = cfg

    @cached_property
    def system(self):
        c = self.cfg
        return LagrangianSystem(c.q, c.v, c.u, c.metric, c.potential, c.input_matrix, c.name)

    @cached_property
    def csf(self):
        return euler_lagrange(self.system)

    @cached_property
    def selection(self):
        c = self.cfg
        return [(c.u.index(i), c.q.index(q)) for i, q in c.promotion]

    @cached_property
    def gen(self):
        return promote(self.csf, self.selection)

    @property
    def max_order(self):
        return self.cfg.solver["max_order"]

    @cached_property
    def flat_map(self):
        s = self.cfg.solver
        return build_flat_map(self.csf, self.cfg.flat_output, self.cfg.Fq,
                              max_order=s["max_order"], check_points=s["check_points"],
                              tol=s["residual_tol"], seed=s["seed"],
                              center=self.cfg.equilibrium)

    @cached_property
    def gen_map(self):
        return restrict_to_generalized(self.flat_map, self.gen)

    @property
    def m(self):
        return len(self.cfg.flat_output)

    def equilibrium_jet(self, y=None):
        y = self.cfg.equilibrium if y is None else y
        return make_equilibrium(self.m, y, self.max_order)

    @cached_property
    def y_s(self):
        return self.equilibrium_jet()


def load_project(path_or_cfg):
    return Project(path_or_cfg)
