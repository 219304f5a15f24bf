"""Multi-indices, jet coordinates and the total time derivative.

Jet coordinates of an m-component signal are plain variable names:
``y{j}`` for the value of component j (1-based) and ``y{j}_d{a}`` for its
a-th time derivative.  Other prefixes (``w`` for new inputs) follow the same
pattern.
"""

import re
from dataclasses import dataclass

import numpy as np

from .errors import MultiIndexError, OrderOverflowError
from .expr import Var, directional, ZERO

DEFAULT_MAX_ORDER = 6

_JET_RE = re.compile(r"^([A-Za-z]+)([1-9][0-9]*)(?:_d([0-9]+))?$")


class MultiIndex(tuple):
    """Tuple of per-component orders with componentwise arithmetic.

    ``+`` and ``-`` act componentwise (not tuple concatenation).  Components
    may be negative only as transient results of subtraction; range helpers
    treat a lower bound above the upper bound as empty.
    """

    def __new__(cls, orders=()):
        orders = tuple(int(a) for a in orders)
        return super().__new__(cls, orders)

    @property
    def total(self):
        """``#A``: sum of the components."""
        return sum(self)

    @property
    def is_nonnegative(self):
        return all(a >= 0 for a in self)

    def _check(self, other):
        other = MultiIndex(other)
        if len(other) != len(self):
            raise MultiIndexError(f"length mismatch: {len(self)} vs {len(other)}")
        return other

    def __add__(self, other):
        other = self._check(other)
        return MultiIndex(a + b for a, b in zip(self, other))

    def __sub__(self, other):
        other = self._check(other)
        return MultiIndex(a - b for a, b in zip(self, other))

    def leq(self, other):
        """Componentwise ``self <= other`` (the comparison operators keep
        tuple semantics so multi-indices still sort)."""
        other = self._check(other)
        return all(a <= b for a, b in zip(self, other))

    def __repr__(self):
        return "MultiIndex(" + ", ".join(map(str, self)) + ")"

    def __str__(self):
        return "(" + ",".join(map(str, self)) + ")"


def mi_add(a, b):
    return MultiIndex(a) + b


def mi_sub(a, b):
    return MultiIndex(a) - b


def constant(m, value):
    return MultiIndex([value] * m)


# -- naming contract ---------------------------------------------------------------

def jet_name(j, order, prefix="y"):
    """Canonical name of the ``order``-th derivative of component ``j`` (1-based)."""
    if j < 1 or order < 0:
        raise MultiIndexError(f"invalid jet coordinate ({j}, {order})")
    return f"{prefix}{j}" if order == 0 else f"{prefix}{j}_d{order}"


def parse_jet_name(name, prefix="y"):
    """Inverse of :func:`jet_name`; returns ``(j, order)`` or ``None``."""
    m = _JET_RE.match(name)
    if m is None or m.group(1) != prefix:
        return None
    order = int(m.group(3)) if m.group(3) is not None else 0
    if m.group(3) is not None and (order == 0 or m.group(3).startswith("0")):
        return None
    return int(m.group(2)), order


def jet_range(j, lo, hi, prefix="y"):
    """Names of ``y^j_[lo, hi]``; empty when ``lo > hi``."""
    return [jet_name(j, a, prefix) for a in range(max(lo, 0), hi + 1)]


def multi_range(lo, hi, prefix="y"):
    """Names of ``y_[lo, hi]`` for multi-indices ``lo``, ``hi`` (component-major)."""
    out = []
    for j, (a, b) in enumerate(zip(lo, hi), start=1):
        out.extend(jet_range(j, a, b, prefix))
    return out


def all_jet_names(m, max_order, prefix="y"):
    return multi_range([0] * m, [max_order] * m, prefix)


def jet_orders(expr, m, prefix="y"):
    """Highest derivative order of each component appearing in ``expr``
    (``-1`` when the component is absent)."""
    orders = [-1] * m
    for name in expr.free:
        parsed = parse_jet_name(name, prefix)
        if parsed is not None and parsed[0] <= m:
            j, a = parsed
            orders[j - 1] = max(orders[j - 1], a)
    return orders


# -- total derivative ----------------------------------------------------------------

def total_derivative(e, order_cap=DEFAULT_MAX_ORDER, prefix="y", extra=None):
    """Prolongation ``sum_{j,a} y^j_[a+1] * d e / d y^j_[a]``.

    ``extra`` maps further time-dependent variable names to the names of
    their derivatives (e.g. ``{"phi": "phi_d1"}``); unlisted variables are
    constants.  Raises :class:`OrderOverflowError` if the result would need a
    jet coordinate above ``order_cap``.
    """
    seeds = {}
    for name in e.free:
        parsed = parse_jet_name(name, prefix)
        if parsed is not None:
            j, a = parsed
            if a + 1 > order_cap:
                raise OrderOverflowError(
                    f"{name} cannot be differentiated within order cap {order_cap}")
            seeds[name] = Var(jet_name(j, a + 1, prefix))
        elif extra and name in extra:
            seeds[name] = Var(extra[name])
    if not seeds:
        return ZERO
    return directional(e, seeds)


# -- jet points -------------------------------------------------------------------------

@dataclass(frozen=True)
class JetPoint:
    """Values ``y^j_[a]`` for ``j = 1..m`` and ``a = 0..max_order``."""

    values: np.ndarray
    prefix: str = "y"

    def __post_init__(self):
        v = np.array(self.values, dtype=float)
        if v.ndim != 2:
            raise MultiIndexError("jet values must be an (m, max_order+1) array")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def m(self):
        return self.values.shape[0]

    @property
    def max_order(self):
        return self.values.shape[1] - 1

    @property
    def y(self):
        return self.values[:, 0].copy()

    def binding(self):
        return {jet_name(j + 1, a, self.prefix): float(self.values[j, a])
                for j in range(self.m) for a in range(self.max_order + 1)}

    def vector(self, names):
        b = self.binding()
        return np.array([b[n] for n in names])

    def is_equilibrium(self, tol=0.0):
        return bool(np.all(np.abs(self.values[:, 1:]) <= tol))

    @classmethod
    def from_binding(cls, binding, m, max_order, prefix="y"):
        v = np.zeros((m, max_order + 1))
        for name, val in binding.items():
            parsed = parse_jet_name(name, prefix)
            if parsed and parsed[0] <= m and parsed[1] <= max_order:
                v[parsed[0] - 1, parsed[1]] = val
        return cls(v, prefix)


def make_equilibrium(m, y0, max_order=DEFAULT_MAX_ORDER, prefix="y"):
    """Jet point at rest: ``y_[0] = y0`` and every derivative zero."""
    y0 = np.asarray(y0, dtype=float).ravel()
    if y0.shape != (m,):
        raise MultiIndexError(f"expected {m} equilibrium values, got {y0.size}")
    v = np.zeros((m, max_order + 1))
    v[:, 0] = y0
    return JetPoint(v, prefix)
