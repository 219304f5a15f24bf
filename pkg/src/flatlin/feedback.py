"""Quasi-static feedback from a generalized flat map and a chain-length choice.

With chain lengths ``kappa``, every jet slot ``y^j_[a]`` with ``a >= kappa^j``
is replaced by the new input jet ``w^j_[a - kappa^j]``.  The lower slots
``y_[0, kappa-1]`` are recovered from the measured state ``(q~, v~)`` by a
Newton solve (the map ``psi``), and the input follows by evaluating the
input rows of the flat map on the completed jets.
"""

import logging
from dataclasses import dataclass, field, replace
from functools import cached_property

import numpy as np

from .errors import (
    BranchSwitchError, ConvergenceError, EvaluationError, FeedbackError,
    SingularJacobianError,
)
from .expr import Var, compile_exprs, diff, substitute_many
from .flatness import KappaCandidate, sigma_min
from .jets import MultiIndex, jet_name, jet_orders, multi_range

log = logging.getLogger(__name__)


def w_name(j, order):
    return jet_name(j, order, prefix="w")


@dataclass
class SolverSettings:
    tol: float = 1e-10
    max_iter: int = 50
    max_halvings: int = 30
    cond_limit: float = 1e14


@dataclass(frozen=True, eq=False)
class FeedbackLaw:
    """Quasi-static law ``u~ = alpha(q~, v~, w, w_[1], ...)``.

    ``unknowns`` are the jet names solved for by ``psi``; ``w_state`` the
    new-input slots entering the state equations and ``w_input`` those
    entering the input rows.
    """

    fm: object
    candidate: KappaCandidate
    y_s: np.ndarray
    settings: SolverSettings = field(default_factory=SolverSettings)

    @property
    def kappa(self):
        return self.candidate.kappa

    @property
    def m(self):
        return self.fm.m

    @cached_property
    def substitution(self):
        sub = {}
        for j in range(1, self.m + 1):
            kj = self.kappa[j - 1]
            for a in range(kj, self.fm.max_order + 1):
                sub[jet_name(j, a)] = Var(w_name(j, a - kj))
        return sub

    @cached_property
    def unknowns(self):
        return multi_range([0] * self.m, [k - 1 for k in self.kappa])

    @cached_property
    def _maps(self):
        fm = self.fm
        rows = list(fm.Fq) + list(fm.Fv) + list(fm.Fu)
        rows += [e for pair in fm.u_derivs for e in pair]
        return substitute_many(rows, self.substitution)

    @property
    def state_rows(self):
        return self._maps[:2 * self.fm.n]

    @property
    def input_rows(self):
        n2 = 2 * self.fm.n
        return self._maps[n2:n2 + len(self.fm.Fu)]

    @property
    def input_derivative_rows(self):
        """``(TD, TD^2)`` of the promoted input rows in ``(y, w)`` variables."""
        rest = self._maps[2 * self.fm.n + len(self.fm.Fu):]
        return [(rest[2 * i], rest[2 * i + 1]) for i in range(len(rest) // 2)]

    def _w_slots(self, rows):
        orders = jet_orders_any(rows, self.m, "w")
        return MultiIndex(o + 1 for o in orders)

    @cached_property
    def w_state_count(self):
        """Number of w-slots per component entering the state equations."""
        return self._w_slots(self.state_rows)

    @cached_property
    def w_input_count(self):
        """Number of w-slots per component consumed by the law (psi included)."""
        return self._w_slots(list(self.state_rows) + list(self.input_rows))

    @cached_property
    def w_names(self):
        """All w-slots the law and its input derivatives may need."""
        return multi_range([0] * self.m, [self.fm.max_order - k for k in self.kappa], "w")

    @cached_property
    def _residual_fn(self):
        rows = list(self.state_rows)
        jac = [diff(r, u) for r in rows for u in self.unknowns]
        return compile_exprs(rows + jac, self.unknowns + self.w_names)

    @cached_property
    def _input_fn(self):
        rows = list(self.input_rows)
        return compile_exprs(rows, self.unknowns + self.w_names)

    @cached_property
    def _input_deriv_fn(self):
        rows = [e for pair in self.input_derivative_rows for e in pair]
        return compile_exprs(rows, self.unknowns + self.w_names) if rows else None

    def with_settings(self, settings):
        """Copy with other solver settings, sharing the compiled functions."""
        other = FeedbackLaw(self.fm, self.candidate, self.y_s, settings)
        shared = ("substitution", "unknowns", "_maps", "w_names", "_residual_fn",
                  "_input_fn", "_input_deriv_fn")
        other.__dict__.update({k: self.__dict__[k] for k in shared if k in self.__dict__})
        return other

    @cached_property
    def w_index(self):
        """``(component, order)`` index arrays of ``w_names`` into a w-jet array."""
        pairs = [(j, b) for j in range(self.m) for b in range(self.fm.max_order - self.kappa[j] + 1)]
        return np.array([p[0] for p in pairs], int), np.array([p[1] for p in pairs], int)

    def w_vector(self, w):
        """Flatten a w-jet given as ``(m, orders)`` array or name mapping."""
        if isinstance(w, dict):
            return [float(w.get(n, 0.0)) for n in self.w_names]
        w = np.asarray(w, float)
        if w.shape[1] < self.fm.max_order + 1:
            w = np.pad(w, ((0, 0), (0, self.fm.max_order + 1 - w.shape[1])))
        j, b = self.w_index
        return w[j, b].tolist()

    def equilibrium_guess(self, y=None):
        y = self.y_s if y is None else np.asarray(y, float)
        guess = []
        for j in range(self.m):
            for a in range(self.kappa[j]):
                guess.append(y[j] if a == 0 else 0.0)
        return np.array(guess)

    def equilibrium_w(self, y=None):
        """w-jet that holds the flat output at rest at ``y``."""
        y = self.y_s if y is None else np.asarray(y, float)
        w = np.zeros((self.m, self.fm.max_order + 1))
        for j in range(self.m):
            if self.kappa[j] == 0:
                w[j, 0] = y[j]
        return w

    def residual(self, x, target, wv):
        vals = self._residual_fn.raw(list(x) + wv)
        n2 = 2 * self.fm.n
        r = np.array(vals[:n2]) - target
        J = np.array(vals[n2:]).reshape(n2, n2)
        return r, J


def jet_orders_any(rows, m, prefix):
    orders = [-1] * m
    for e in rows:
        for j, o in enumerate(jet_orders(e, m, prefix)):
            orders[j] = max(orders[j], o)
    return orders


def synthesize(fm, candidate, y_s, settings=None):
    """Build the feedback law for ``candidate`` (a KappaCandidate or a bare
    multi-index) on the generalized map ``fm``."""
    if not isinstance(candidate, KappaCandidate):
        candidate = KappaCandidate(MultiIndex(candidate), "user", ())
    kappa = candidate.kappa
    if len(kappa) != fm.m or not kappa.leq(fm.R) or kappa.total != 2 * fm.n:
        raise FeedbackError(f"kappa {kappa} is not admissible for R={fm.R}, n={fm.n}")
    y_s = getattr(y_s, "y", y_s)
    return FeedbackLaw(fm, candidate, np.asarray(y_s, float).ravel(), settings or SolverSettings())


# -- solving --------------------------------------------------------------------------

@dataclass
class SolveResult:
    x: np.ndarray
    residual: float
    iterations: int
    jacobian: np.ndarray

    @property
    def sigma_min(self):
        """Smallest singular value of the state-map Jacobian at the solution."""
        return sigma_min(self.jacobian)


def _eval(law, x, target, wv):
    try:
        r, J = law.residual(x, target, wv)
    except (EvaluationError, ZeroDivisionError, ValueError, FloatingPointError):
        return None, None, np.inf
    norm = float(np.max(np.abs(r)))
    return r, J, norm if np.isfinite(norm) else np.inf


def _step(J, r, limit):
    try:
        step = np.linalg.solve(J, -r)
    except np.linalg.LinAlgError:
        raise SingularJacobianError("Jacobian singular") from None
    # cheap screen first; the condition number only when the step looks suspicious
    if not np.all(np.isfinite(step)) or np.max(np.abs(step)) > 1e6 * (1.0 + np.max(np.abs(r))):
        if np.linalg.cond(J) > limit:
            raise SingularJacobianError(f"Jacobian singular (sigma_min={sigma_min(J):.3e})")
    return step


def _newton(law, target, wv, x0):
    s = law.settings
    x = np.array(x0, float)
    r, J, norm = _eval(law, x, target, wv)
    if r is None:
        raise ConvergenceError("flat map undefined at the starting guess")
    it = 0
    while norm > s.tol:
        if it >= s.max_iter:
            raise ConvergenceError("Newton solve did not converge", norm, sigma_min(J))
        step = _step(J, r, s.cond_limit)
        lam = 1.0
        for _ in range(s.max_halvings + 1):
            rn, Jn, nn = _eval(law, x + lam * step, target, wv)
            if nn < norm:
                break
            lam *= 0.5
        else:
            raise ConvergenceError("line search failed", norm, sigma_min(J))
        x, r, J, norm = x + lam * step, rn, Jn, nn
        it += 1
    # one polishing step, kept only if it does not increase the residual
    step = _step(J, r, s.cond_limit)
    rn, Jn, nn = _eval(law, x + step, target, wv)
    if nn <= norm:
        x, J, norm = x + step, Jn, nn
    return SolveResult(x, norm, it, J)


def solve_psi(law, qt, vt, w, guess=None):
    """Lower jet slots ``y_[0, kappa-1]`` consistent with state ``(qt, vt)``
    and new-input jet ``w`` (an array, a name mapping, or an already
    flattened list from :meth:`FeedbackLaw.w_vector`); returns a
    :class:`SolveResult`."""
    target = np.concatenate([np.ravel(qt), np.ravel(vt)]).astype(float)
    wv = w if isinstance(w, list) else law.w_vector(w)
    x0 = law.equilibrium_guess() if guess is None else guess
    return _newton(law, target, wv, x0)


def feedback(law, qt, vt, w, guess=None):
    """Input ``u~`` of the quasi-static law at state ``(qt, vt)``."""
    wv = w if isinstance(w, list) else law.w_vector(w)
    res = solve_psi(law, qt, vt, wv, guess)
    return evaluate_inputs(law, res.x, wv)[0]


def evaluate_inputs(law, x, wv, derivatives=False):
    """``u~`` (and optionally ``(u~_[1], u~_[2])`` of the promoted inputs)
    on the jets completed from ``x`` and ``wv``."""
    args = list(x) + list(wv)
    u = np.array(law._input_fn.raw(args))
    if not derivatives:
        return u, None, None
    fn = law._input_deriv_fn
    if fn is None:
        return u, np.zeros(0), np.zeros(0)
    d = np.array(fn.raw(args))
    return u, d[0::2], d[1::2]


class Workspace:
    """Caller-owned warm-start state for repeated solves along a trajectory.

    Successive accepted solutions must move continuously: a jump larger than
    ``jump_factor`` times the running step scale (and above ``jump_floor``)
    raises :class:`BranchSwitchError`.
    """

    def __init__(self, law, guess=None, jump_factor=50.0, jump_floor=1e-3):
        self.law = law
        self.x = law.equilibrium_guess() if guess is None else np.array(guess, float)
        self.jump_factor = jump_factor
        self.jump_floor = jump_floor
        self.scale = 0.0
        self.solves = 0
        self.max_residual = 0.0
        self.min_sigma = np.inf

    def solve(self, qt, vt, w, accept=True):
        res = solve_psi(self.law, qt, vt, w, self.x)
        self.solves += 1
        self.max_residual = max(self.max_residual, res.residual)
        if accept:
            self.min_sigma = min(self.min_sigma, res.sigma_min)
            jump = float(np.max(np.abs(res.x - self.x)))
            limit = max(self.jump_floor, self.jump_factor * self.scale)
            if self.solves > 1 and jump > limit:
                raise BranchSwitchError(
                    f"solution jumped by {jump:.3e} (limit {limit:.3e}); branch change suspected")
            self.scale = max(0.9 * self.scale, jump)
            self.x = res.x
        return res


# -- diagnostics ------------------------------------------------------------------------------

@dataclass(frozen=True)
class DependenceReport:
    state_names: tuple
    sensitivity: tuple
    depends: tuple
    w_slots: MultiIndex
    threshold: float

    def independent_of(self):
        return [n for n, d in zip(self.state_names, self.depends) if not d]

    def to_dict(self):
        return {"state": list(self.state_names), "sensitivity": list(self.sensitivity),
                "depends": list(self.depends), "w_slots": list(self.w_slots),
                "threshold": self.threshold}


def random_consistent_point(law, rng, scale=0.05):
    """State, w-jet and true lower slots generated from a random jet near
    the equilibrium."""
    fm = law.fm
    jets = np.zeros((fm.m, fm.max_order + 1))
    jets[:, 0] = law.y_s
    jets += rng.uniform(-scale, scale, jets.shape)
    q, v = fm.state(jets.ravel())
    w = np.zeros_like(jets)
    x = []
    for j in range(fm.m):
        k = law.kappa[j]
        w[j, :fm.max_order + 1 - k] = jets[j, k:]
        x.extend(jets[j, :k])
    return q, v, w, np.array(x)


def dependence_report(law, n_points=5, step=1e-4, threshold=1e-9, seed=0, scale=0.05):
    """Finite-difference sensitivity of ``u~`` to each state component.

    Central differences of the law at random consistent points; components
    whose largest sensitivity stays below ``threshold`` are reported as
    independent.
    """
    fm = law.fm
    names = tuple(fm.q_names) + tuple(fm.v_names)
    rng = np.random.default_rng(seed)
    sens = np.zeros(len(names))
    law_t = law.with_settings(replace(law.settings, tol=1e-13))
    for _ in range(n_points):
        q, v, w, x = random_consistent_point(law, rng, scale)
        state = np.concatenate([q, v])
        for i in range(len(names)):
            hi, lo = state.copy(), state.copy()
            hi[i] += step
            lo[i] -= step
            n = fm.n
            u_hi = feedback(law_t, hi[:n], hi[n:], w, x)
            u_lo = feedback(law_t, lo[:n], lo[n:], w, x)
            sens[i] = max(sens[i], float(np.max(np.abs(u_hi - u_lo))) / (2 * step))
    depends = tuple(bool(s > threshold) for s in sens)
    return DependenceReport(names, tuple(float(s) for s in sens), depends,
                            law.w_input_count, threshold)
