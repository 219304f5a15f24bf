"""Flat parameterizations, their equilibrium Jacobians and chain-length search.

Given a configuration parameterization ``q = F_q(y-jets)`` the velocity map
is its total derivative and the forces follow from the equations of motion.
Restricting to a generalized system keeps the unpromoted coordinates and
turns the promoted coordinates into input rows.  At an equilibrium jet the
Jacobian with respect to the jet coordinates decides which integrator-chain
lengths a regular quasi-static feedback can produce.
"""

import itertools
import logging
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .errors import (
    EvaluationError, FlatnessError, OrderBoundError, ParameterizationError,
)
from .expr import add, as_expr, compile_exprs, diff, mul, substitute_many
from .jets import (
    DEFAULT_MAX_ORDER, JetPoint, MultiIndex, all_jet_names, jet_name, jet_orders,
    parse_jet_name,
    make_equilibrium, total_derivative,
)
from .mechanics import solve_symbolic

log = logging.getLogger(__name__)

RANK_RTOL = 1e-8


def numeric_rank(a, rtol=RANK_RTOL):
    """Rank via singular values with threshold ``rtol * sigma_max``."""
    a = np.atleast_2d(np.asarray(a, float))
    if a.size == 0:
        return 0
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def sigma_min(a):
    a = np.atleast_2d(np.asarray(a, float))
    if a.size == 0:
        return 0.0
    return float(np.linalg.svd(a, compute_uv=False)[-1])


@dataclass(frozen=True, eq=False)
class FlatMap:
    """Parameterization of state and input rows by jets of an m-component
    flat output.

    ``Fq``/``Fv`` are indexed like ``q_names``/``v_names`` and ``Fu`` like
    ``u_names``.  ``Fa`` (the accelerations, ``TD(Fv)``) is kept because the
    dynamics residual and the input derivatives need it.  For a generalized
    map, ``u_derivs`` holds ``(TD, TD^2)`` of the promoted input rows.
    """

    m: int
    q_names: tuple
    v_names: tuple
    u_names: tuple
    Fq: tuple
    Fv: tuple
    Fa: tuple
    Fu: tuple
    R: MultiIndex
    S: MultiIndex
    max_order: int = DEFAULT_MAX_ORDER
    flat_output: tuple = ()
    u_derivs: tuple = ()
    generalized: bool = False
    system: object = field(default=None, repr=False)

    @property
    def n(self):
        """Number of configuration rows (``p`` or ``p - k``)."""
        return len(self.Fq)

    @cached_property
    def jet_names(self):
        return all_jet_names(self.m, self.max_order)

    @cached_property
    def _state_fn(self):
        return compile_exprs(list(self.Fq) + list(self.Fv), self.jet_names)

    @cached_property
    def _all_fn(self):
        rows = list(self.Fq) + list(self.Fv) + list(self.Fu)
        rows += [e for pair in self.u_derivs for e in pair]
        return compile_exprs(rows, self.jet_names, backend="numpy")

    def _vector(self, jets):
        if isinstance(jets, JetPoint):
            v = np.zeros((self.m, self.max_order + 1))
            n = min(self.max_order, jets.max_order) + 1
            v[:, :n] = jets.values[:, :n]
            return v.ravel()
        return np.asarray(jets, float).ravel()

    def state(self, jets):
        """``(q, v)`` at a jet point."""
        out = self._state_fn(self._vector(jets))
        return out[:self.n], out[self.n:]

    def evaluate_all(self, jet_array):
        """Vectorized evaluation over ``jet_array`` of shape
        ``(m, max_order+1, T)``: returns ``q, v, u, du1, du2``."""
        x = [jet_array[j, a] for j in range(self.m) for a in range(self.max_order + 1)]
        out = self._all_fn(x)
        n, nu = self.n, len(self.Fu)
        q, v, u = out[:n], out[n:2 * n], out[2 * n:2 * n + nu]
        d = out[2 * n + nu:]
        kd = len(self.u_derivs)
        return q, v, u, d[0:2 * kd:2], d[1:2 * kd:2]

    def argument_pattern(self, rows):
        """Per component, the sorted list of derivative orders used by ``rows``."""
        used = [set() for _ in range(self.m)]
        for e in rows:
            for name in e.free:
                parsed = parse_jet_name(name)
                if parsed:
                    used[parsed[0] - 1].add(parsed[1])
        return [sorted(s) for s in used]


def _scan_R(Fv, m):
    return MultiIndex(o + 1 if o >= 0 else 0 for o in
                      _max_orders(Fv, m))


def _scan_S(Fu, m):
    return MultiIndex(max(o, 0) for o in _max_orders(Fu, m))


def _max_orders(rows, m):
    orders = [-1] * m
    for e in rows:
        for j, o in enumerate(jet_orders(e, m)):
            orders[j] = max(orders[j], o)
    return orders


def random_jets(m, max_order, rng, scale=0.5, center=None):
    """Random jet point; ``center`` (an equilibrium) shifts the values."""
    v = rng.uniform(-scale, scale, size=(m, max_order + 1))
    if center is not None:
        v[:, 0] += np.asarray(center, float)
    return JetPoint(v)


def build_flat_map(csf, flat_output, Fq, max_order=DEFAULT_MAX_ORDER,
                   check_points=50, tol=1e-8, seed=0, center=None, scale=0.5,
                   enforce_bounds=None):
    """Assemble ``(F_q, F_v, F_u)`` for a classical system.

    ``Fq`` lists one expression per coordinate (jet variables only).  The
    velocity map is ``TD(F_q)``; the forces solve ``G u = M TD(F_v) + c``
    in the least-squares sense (exact when the parameterization is flat).
    The parameterization is certified by the dynamics residual at
    ``check_points`` random jets; a failure raises ParameterizationError.
    """
    sys = csf.system
    p, m_in = sys.p, sys.m
    Fq = [as_expr(e) for e in Fq]
    flat_output = tuple(as_expr(e) for e in flat_output)
    m = len(flat_output)
    if len(Fq) != p:
        raise FlatnessError(f"need {p} configuration rows, got {len(Fq)}")
    jetset = set(all_jet_names(m, max_order))
    for i, e in enumerate(Fq):
        stray = e.free - jetset
        if stray:
            raise FlatnessError(f"row {sys.q[i]} uses non-jet variables {sorted(stray)}")
    for j, e in enumerate(flat_output):
        stray = e.free - set(sys.q)
        if stray:
            raise FlatnessError(f"flat output y{j + 1} is not configuration-only: {sorted(stray)}")

    Fv = [total_derivative(e, max_order) for e in Fq]
    Fa = [total_derivative(e, max_order) for e in Fv]

    # substitute the parameterization into M, G, c and solve for the forces
    subs = dict(zip(sys.q, Fq))
    subs.update(zip(sys.v, Fv))
    flat_M = [e for row in csf.M for e in row]
    flat_G = [e for row in csf.G for e in row]
    out = substitute_many(flat_M + flat_G + list(csf.c), subs)
    Mq = [out[i * p:(i + 1) * p] for i in range(p)]
    Gq = [out[p * p + i * m_in:p * p + (i + 1) * m_in] for i in range(p)]
    cq = out[p * p + p * m_in:]
    rhs = [add(*[mul(Mq[i][j], Fa[j]) for j in range(p)], cq[i]) for i in range(p)]
    if m_in == p:
        Fu, _ = solve_symbolic(Gq, rhs)
    else:
        GtG = [[add(*[mul(Gq[r][a], Gq[r][b]) for r in range(p)]) for b in range(m_in)]
               for a in range(m_in)]
        Gtr = [add(*[mul(Gq[r][a], rhs[r]) for r in range(p)]) for a in range(m_in)]
        Fu, _ = solve_symbolic(GtG, Gtr)

    R = _scan_R(Fv, m)
    S = _scan_S(Fu, m)
    fm = FlatMap(m=m, q_names=tuple(sys.q), v_names=tuple(sys.v), u_names=tuple(sys.u),
                 Fq=tuple(Fq), Fv=tuple(Fv), Fa=tuple(Fa), Fu=tuple(Fu), R=R, S=S,
                 max_order=max_order, flat_output=flat_output, system=csf)
    if enforce_bounds is None:
        enforce_bounds = m_in == p - 1
    if enforce_bounds:
        if not all(2 <= r <= 4 for r in R) or 4 not in R:
            raise OrderBoundError(
                f"R={R} violates 2 <= R <= 4 with some component equal to 4")
    if check_points:
        report = certify(fm, n_points=check_points, seed=seed, center=center, scale=scale)
        if not report.dynamics_residual <= tol or not report.output_residual <= tol:
            raise ParameterizationError(
                f"parameterization fails: dynamics residual {report.dynamics_residual:.3e}, "
                f"flat-output residual {report.output_residual:.3e} (tol {tol:g})")
    log.info("flat map built: R=%s S=%s", R, S)
    return fm


@dataclass(frozen=True)
class Certificate:
    dynamics_residual: float
    output_residual: float
    n_points: int


def certify(fm, n_points=50, seed=0, center=None, scale=0.5):
    """Max relative residual of the equations of motion and of ``phi(F_q) = y``
    at random jets."""
    csf = fm.system
    rng = np.random.default_rng(seed)
    names = fm.jet_names
    fn = compile_exprs(list(fm.Fq) + list(fm.Fv) + list(fm.Fa) + list(fm.Fu), names)
    phi = compile_exprs(list(fm.flat_output), list(csf.system.q))
    p = csf.p
    dyn = out = 0.0
    done = 0
    while done < n_points:
        jp = random_jets(fm.m, fm.max_order, rng, scale, center)
        try:
            vals = fn(jp.values.ravel())
        except EvaluationError:
            continue
        q, v, a, u = vals[:p], vals[p:2 * p], vals[2 * p:3 * p], vals[3 * p:]
        M, G, c = csf.matrices(q, v)
        terms = np.abs(M @ a) + np.abs(c) + np.abs(G @ u)
        res = np.abs(M @ a + c - G @ u)
        dyn = max(dyn, float(np.max(res / (1.0 + terms))))
        y = phi(q)
        out = max(out, float(np.max(np.abs(y - jp.values[:, 0]) / (1.0 + np.abs(y)))))
        done += 1
    return Certificate(dyn, out, n_points)


def restrict_to_generalized(fm, gen):
    """Generalized map: keep unpromoted rows, promoted coordinates become inputs."""
    if gen.k == 0:
        return FlatMap(m=fm.m, q_names=fm.q_names, v_names=fm.v_names, u_names=fm.u_names,
                       Fq=fm.Fq, Fv=fm.Fv, Fa=fm.Fa, Fu=fm.Fu, R=fm.R, S=fm.S,
                       max_order=fm.max_order, flat_output=fm.flat_output,
                       generalized=True, system=gen)
    unsel = gen.unsel_coords
    sel = gen.sel_coords
    Fq = tuple(fm.Fq[i] for i in unsel)
    Fv = tuple(fm.Fv[i] for i in unsel)
    Fa = tuple(fm.Fa[i] for i in unsel)
    Fu = tuple(fm.Fq[c] for c in sel) + tuple(fm.Fu[i] for i in gen.rest_inputs)
    derivs = tuple((fm.Fv[c], fm.Fa[c]) for c in sel)
    # the flat output in generalized variables: promoted coordinates are inputs
    return FlatMap(m=fm.m, q_names=gen.q_names, v_names=gen.v_names, u_names=gen.u_names,
                   Fq=Fq, Fv=Fv, Fa=Fa, Fu=Fu, R=_scan_R(Fv, fm.m), S=_scan_S(Fu, fm.m),
                   max_order=fm.max_order, flat_output=fm.flat_output, u_derivs=derivs,
                   generalized=True, system=gen)


# -- equilibrium Jacobian -----------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class JacobianBlocks:
    """Compiled ``d(F_q; F_v) / d y_[a]`` for ``a = 0..orders-1``."""

    fm: FlatMap
    orders: int

    @cached_property
    def _fn(self):
        rows = list(self.fm.Fq) + list(self.fm.Fv)
        entries = [diff(r, jet_name(j + 1, a)) for a in range(self.orders)
                   for r in rows for j in range(self.fm.m)]
        return compile_exprs(entries, self.fm.jet_names)

    def evaluate(self, jets):
        """Array of shape ``(orders, 2n, m)``."""
        vals = self._fn(self.fm._vector(jets))
        return vals.reshape(self.orders, 2 * self.fm.n, self.fm.m)


def jacobian_blocks(fm, orders=None):
    if orders is None:
        orders = max(4, max(fm.R))
    cache = fm.__dict__.setdefault("_jac_cache", {})
    if orders not in cache:
        cache[orders] = JacobianBlocks(fm, orders)
    return cache[orders]


@dataclass(frozen=True)
class EquilibriumJacobianReport:
    """Blocks ``dq[a] = d F_q / d y_[a]`` and ``dv[a] = d F_v / d y_[a]``
    (``a = 0..3``) at an equilibrium jet, with rank summaries."""

    y_s: np.ndarray
    dq: np.ndarray
    dv: np.ndarray
    rank_y: int
    rank_y2: int
    zero_block_max: float
    velocity_block_error: float
    generalized: bool
    n_rows: int
    m: int

    def to_dict(self):
        return {
            "y_s": self.y_s.tolist(),
            "rank_dy_Fq": self.rank_y,
            "rank_dy2_Fq": self.rank_y2,
            "zero_block_max": self.zero_block_max,
            "velocity_block_error": self.velocity_block_error,
            "blocks": {f"dFq/dy[{a}]": self.dq[a].tolist() for a in range(4)}
            | {f"dFv/dy[{a}]": self.dv[a].tolist() for a in range(4)},
        }


def equilibrium_jacobian(fm, y_s):
    """Jacobian blocks of ``(F_q; F_v)`` at the equilibrium jet ``y_s``."""
    if not isinstance(y_s, JetPoint):
        y_s = make_equilibrium(fm.m, y_s, fm.max_order)
    if not y_s.is_equilibrium():
        raise FlatnessError("equilibrium Jacobian requires a jet point at rest")
    try:
        blocks = jacobian_blocks(fm, max(4, max(fm.R))).evaluate(y_s)
    except EvaluationError as exc:
        raise FlatnessError(f"parameterization undefined at y_s={y_s.y.tolist()}: {exc}") from None
    n = fm.n
    dq, dv = blocks[:4, :n], blocks[:4, n:]
    zero = max(np.max(np.abs(dq[1]), initial=0.0), np.max(np.abs(dq[3]), initial=0.0),
               np.max(np.abs(dv[0]), initial=0.0), np.max(np.abs(dv[2]), initial=0.0))
    vel = max(np.max(np.abs(dv[1] - dq[0]), initial=0.0),
              np.max(np.abs(dv[3] - dq[2]), initial=0.0))
    return EquilibriumJacobianReport(
        y_s=y_s.y, dq=dq, dv=dv, rank_y=numeric_rank(dq[0]), rank_y2=numeric_rank(dq[2]),
        zero_block_max=float(zero), velocity_block_error=float(vel),
        generalized=fm.generalized, n_rows=n, m=fm.m)


@dataclass(frozen=True)
class Check:
    name: str
    ok: bool
    value: object
    expected: str


@dataclass(frozen=True)
class Lemma1Result:
    passed: bool
    checks: tuple

    def failures(self):
        return [c for c in self.checks if not c.ok]

    def to_dict(self):
        return {"passed": self.passed,
                "checks": [{"name": c.name, "ok": c.ok, "value": c.value, "expected": c.expected}
                           for c in self.checks]}


def verify_lemma1(report, tol=1e-9):
    """Structural checks of the equilibrium Jacobian of a classical map.

    Zero blocks (``dF_q/dy_[1]``, ``dF_q/dy_[3]``, ``dF_v/dy``,
    ``dF_v/dy_[2]``), the velocity identities ``dF_v/dy_[1] = dF_q/dy`` and
    ``dF_v/dy_[3] = dF_q/dy_[2]``, full rank ``m`` of ``dF_q/dy`` (``p - 1``
    for a minimally underactuated system) and ``rank dF_q/dy_[2] <= 1``.
    """
    checks = (
        Check("zero blocks", report.zero_block_max <= tol, report.zero_block_max, f"<= {tol:g}"),
        Check("velocity blocks", report.velocity_block_error <= tol,
              report.velocity_block_error, f"<= {tol:g}"),
        Check("rank dFq/dy", report.rank_y == report.m, report.rank_y, f"== {report.m}"),
        Check("rank dFq/dy[2]", report.rank_y2 <= 1, report.rank_y2, "<= 1"),
    )
    return Lemma1Result(all(c.ok for c in checks), checks)


# -- chain-length candidates ------------------------------------------------------------------

@dataclass(frozen=True)
class KappaCandidate:
    """An admissible chain-length multi-index with its rank witness.

    ``permutation`` lists the (0-based) flat-output components forming the
    certifying subset, ``column_j`` the component whose second-derivative
    column completes the rank (case ``"ii"`` only).
    """

    kappa: MultiIndex
    case: str
    permutation: tuple
    column_j: int = None
    margin: float = 0.0

    def label(self):
        ybar = ",".join(f"y{j + 1}" for j in self.permutation)
        col = f" col=y{self.column_j + 1}[2]" if self.column_j is not None else ""
        return f"{self.kappa} case {self.case} ybar=({ybar}){col}"

    def to_dict(self):
        return {"kappa": list(self.kappa), "case": self.case,
                "ybar": [j + 1 for j in self.permutation],
                "column_j": None if self.column_j is None else self.column_j + 1,
                "margin": self.margin}


def _equilibrium_blocks(fm, y_s):
    if isinstance(y_s, EquilibriumJacobianReport):
        return y_s.dq
    return equilibrium_jacobian(fm, y_s).dq


def enumerate_kappa(fm, y_s, rtol=RANK_RTOL):
    """All chain lengths of the two admissible shapes certified at ``y_s``.

    Case i: ``n`` components whose ``dF_q/dy`` columns have rank ``n``, each
    with chain length 2.  Case ii: ``n - 1`` components of rank ``n - 1``
    plus one member ``j`` whose ``dF_q/dy^j_[2]`` column completes the rank;
    ``j`` gets 4, the other members 2.  Here ``n`` is the number of
    configuration rows of ``fm``.
    """
    dq = _equilibrium_blocks(fm, y_s)
    J0, J2 = dq[0], dq[2]
    n, m = fm.n, fm.m
    out_i, out_ii = [], []
    for subset in itertools.combinations(range(m), n):
        block = J0[:, subset]
        if numeric_rank(block, rtol) == n:
            kappa = MultiIndex(2 if j in subset else 0 for j in range(m))
            if kappa.leq(fm.R) and kappa.total == 2 * n:
                out_i.append(KappaCandidate(kappa, "i", subset, None, sigma_min(block)))
    if n >= 1:
        for subset in itertools.combinations(range(m), n - 1):
            block = J0[:, subset]
            if numeric_rank(block, rtol) != n - 1:
                continue
            for j in subset:
                full = np.column_stack([block, J2[:, j]])
                if numeric_rank(full, rtol) != n:
                    continue
                kappa = MultiIndex(4 if i == j else 2 if i in subset else 0 for i in range(m))
                if kappa.leq(fm.R) and kappa.total == 2 * n:
                    out_ii.append(KappaCandidate(kappa, "ii", subset, j, sigma_min(full)))
    out_i.sort(key=lambda c: -c.margin)
    out_ii.sort(key=lambda c: -c.margin)
    return out_i + out_ii


def regularity_matrix(fm, kappa, jets, blocks=None):
    """``d(F_q; F_v) / d y_[0, kappa-1]`` at ``jets`` (square when
    ``#kappa = 2n``)."""
    kappa = MultiIndex(kappa)
    need = max(max(kappa), 1)
    blocks = blocks if blocks is not None else jacobian_blocks(fm, max(need, 4)).evaluate(jets)
    cols = [blocks[a][:, j] for j in range(fm.m) for a in range(kappa[j])]
    if not cols:
        return np.zeros((2 * fm.n, 0))
    return np.column_stack(cols)


@dataclass(frozen=True)
class RegularityReport:
    kappa: MultiIndex
    sigma_min_eq: float
    sigma_min_ball: float
    regular: bool
    n_samples: int

    def to_dict(self):
        return {"kappa": list(self.kappa), "sigma_min_eq": self.sigma_min_eq,
                "sigma_min_ball": self.sigma_min_ball, "regular": self.regular,
                "n_samples": self.n_samples}


def check_regularity(fm, kappa, y_s, n_samples=20, radius=1e-2, seed=0, rtol=RANK_RTOL):
    """Smallest singular value of the regularity matrix at ``y_s`` and over
    ``n_samples`` random jets within ``radius`` of it."""
    kappa = MultiIndex(kappa)
    if not isinstance(y_s, JetPoint):
        y_s = make_equilibrium(fm.m, y_s, fm.max_order)
    if not kappa.leq(fm.R):
        raise OrderBoundError(f"kappa {kappa} exceeds R={fm.R}")
    if kappa.total != 2 * fm.n:
        raise FlatnessError(f"#kappa must be {2 * fm.n}, got {kappa.total}")
    jb = jacobian_blocks(fm, max(4, max(kappa)))
    A = regularity_matrix(fm, kappa, y_s, jb.evaluate(y_s))
    s = np.linalg.svd(A, compute_uv=False)
    smin = float(s[-1])
    regular = bool(s[-1] > rtol * s[0]) if s[0] > 0 else False
    rng = np.random.default_rng(seed)
    ball = smin
    for _ in range(n_samples):
        pert = y_s.values + rng.uniform(-radius, radius, y_s.values.shape)
        try:
            ball = min(ball, sigma_min(regularity_matrix(fm, kappa, pert.ravel(), jb.evaluate(pert.ravel()))))
        except EvaluationError:
            ball = 0.0
    return RegularityReport(kappa, smin, float(ball), regular, n_samples)


def admissible_kappas(R, total):
    """Every multi-index ``kappa <= R`` with ``#kappa == total``."""
    return [MultiIndex(k) for k in itertools.product(*(range(r + 1) for r in R))
            if sum(k) == total]


def brute_force_kappa(fm, y_s, rtol=RANK_RTOL):
    """Set of ``kappa <= R`` (``#kappa = 2n``) with a regular matrix at ``y_s``."""
    if not isinstance(y_s, JetPoint):
        y_s = make_equilibrium(fm.m, y_s, fm.max_order)
    blocks = jacobian_blocks(fm, max(4, max(fm.R))).evaluate(y_s)
    found = set()
    for kappa in admissible_kappas(fm.R, 2 * fm.n):
        A = regularity_matrix(fm, kappa, y_s, blocks)
        if numeric_rank(A, rtol) == A.shape[0] == A.shape[1]:
            found.add(kappa)
    return found

