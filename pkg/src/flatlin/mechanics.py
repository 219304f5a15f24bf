"""Lagrangian equations of motion and promotion of coordinates to inputs.

A :class:`LagrangianSystem` describes ``L = 1/2 v' g(q) v - V(q)`` with
generalized forces ``G(q) u``.  :func:`euler_lagrange` turns it into the
implicit form ``M(q) a + c(q, v) = G(q) u``.  :func:`promote` swaps ``k``
inputs for ``k`` configuration coordinates, which then act as inputs whose
first and second time derivatives enter the dynamics.
"""

import itertools
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    EquilibriumNotFoundError, EvaluationError, InvalidPromotionError,
    MechanicsError, NonSymmetricMetricError, SingularMassMatrixError,
)
from .expr import (
    ONE, ZERO, Var, add, as_expr, compile_exprs, diff, div, evaluate, mul, neg,
    simplify, substitute_many, sub,
)

log = logging.getLogger(__name__)

COND_LIMIT = 1e12


@dataclass(frozen=True)
class LagrangianSystem:
    """Mechanical system with ``p`` coordinates and ``m`` inputs.

    ``metric`` is a p x p nested list of expressions in ``q``; ``input_matrix``
    is p x m.  Expressions may contain only the names in ``q`` (parameters are
    substituted as numbers before construction).
    """

    q: tuple
    v: tuple
    u: tuple
    metric: tuple
    potential: object
    input_matrix: tuple
    name: str = "system"

    def __post_init__(self):
        object.__setattr__(self, "q", tuple(self.q))
        object.__setattr__(self, "v", tuple(self.v))
        object.__setattr__(self, "u", tuple(self.u))
        object.__setattr__(self, "metric", tuple(tuple(as_expr(e) for e in row) for row in self.metric))
        object.__setattr__(self, "input_matrix", tuple(tuple(as_expr(e) for e in row) for row in self.input_matrix))
        object.__setattr__(self, "potential", as_expr(self.potential))
        p, m = len(self.q), len(self.u)
        if len(self.v) != p:
            raise MechanicsError(f"{p} coordinates but {len(self.v)} velocities")
        if len(self.metric) != p or any(len(r) != p for r in self.metric):
            raise MechanicsError(f"metric must be {p}x{p}")
        if len(self.input_matrix) != p or any(len(r) != m for r in self.input_matrix):
            raise MechanicsError(f"input matrix must be {p}x{m}")
        names = set(self.q)
        if len(names | set(self.v) | set(self.u)) != 2 * p + m:
            raise MechanicsError("coordinate, velocity and input names must be distinct")
        exprs = [e for row in self.metric for e in row] + [self.potential]
        exprs += [e for row in self.input_matrix for e in row]
        stray = set().union(*(e.free for e in exprs)) - names
        if stray:
            raise MechanicsError("system expressions may only depend on coordinates; "
                                 f"found {sorted(stray)}")
        self._check_symmetry()

    @property
    def p(self):
        return len(self.q)

    @property
    def m(self):
        return len(self.u)

    def _check_symmetry(self, samples=5, seed=0):
        rng = np.random.default_rng(seed)
        points = [dict(zip(self.q, rng.uniform(-1.0, 1.0, self.p))) for _ in range(samples)]
        for i, j in itertools.combinations(range(self.p), 2):
            a, b = simplify(self.metric[i][j]), simplify(self.metric[j][i])
            if a is b:
                continue
            for pt in points:
                try:
                    va, vb = evaluate(a, pt), evaluate(b, pt)
                except EvaluationError:
                    continue
                if abs(va - vb) > 1e-12 * (1.0 + abs(va)):
                    raise NonSymmetricMetricError(i, j)


@dataclass(frozen=True, eq=False)
class ClassicalStateForm:
    """``M(q) a + c(q, v) = G(q) u`` with compiled numeric accessors."""

    system: LagrangianSystem
    M: tuple
    c: tuple
    G: tuple
    _fn: object = field(repr=False, default=None)
    _energy: object = field(repr=False, default=None)

    @property
    def p(self):
        return self.system.p

    @property
    def m(self):
        return self.system.m

    def matrices(self, q, v):
        """Numeric ``(M, G, c)`` at ``(q, v)``."""
        p, m = self.p, self.m
        out = self._fn(np.concatenate([np.ravel(q), np.ravel(v)]))
        M = out[:p * p].reshape(p, p)
        G = out[p * p:p * p + p * m].reshape(p, m)
        c = out[p * p + p * m:]
        return M, G, c

    def residual(self, q, v, a, u):
        """Implicit-form residual ``M a + c - G u``."""
        M, G, c = self.matrices(q, v)
        return M @ np.asarray(a, float) + c - G @ np.asarray(u, float)

    def energy(self, q, v):
        return float(self._energy(np.concatenate([np.ravel(q), np.ravel(v)]))[0])

    def power(self, q, v, u):
        """Mechanical power of the inputs, ``v' G(q) u``."""
        _, G, _ = self.matrices(q, v)
        return float(np.asarray(v, float) @ G @ np.asarray(u, float))


def euler_lagrange(sys):
    """Implicit equations of motion of ``sys``.

    ``c_i = sum_jk (d_k g_ij - 1/2 d_i g_jk) v_j v_k + d_i V``, with the
    symmetric pairs merged so that cancelling terms vanish structurally.
    """
    p = sys.p
    g = sys.metric
    v = [Var(n) for n in sys.v]
    dg = {}
    for i, j, k in itertools.product(range(p), repeat=3):
        dg[i, j, k] = diff(g[i][j], sys.q[k])
    c = []
    for i in range(p):
        terms = []
        for j in range(p):
            for k in range(j, p):
                # Christoffel symbols of the first kind, (j, k) and (k, j) merged
                if j == k:
                    coeff = sub(dg[i, j, j], mul(0.5, dg[j, j, i]))
                else:
                    coeff = sub(add(dg[i, j, k], dg[i, k, j]), dg[j, k, i])
                coeff = simplify(coeff)
                if coeff is ZERO:
                    continue
                terms.append(mul(coeff, v[j], v[k]))
        terms.append(diff(sys.potential, sys.q[i]))
        c.append(add(*terms))
    M = tuple(tuple(row) for row in g)
    G = tuple(tuple(row) for row in sys.input_matrix)
    flat = [e for row in M for e in row] + [e for row in G for e in row] + c
    fn = compile_exprs(flat, list(sys.q) + list(sys.v))
    kinetic = mul(0.5, add(*[mul(g[i][j], v[i], v[j]) for i in range(p) for j in range(p)]))
    energy = compile_exprs([add(kinetic, sys.potential)], list(sys.q) + list(sys.v))
    return ClassicalStateForm(sys, M, tuple(c), G, fn, energy)


def classical_rhs(csf, q, v, u):
    """Accelerations ``a`` solving ``M(q) a = G(q) u - c(q, v)``."""
    M, G, c = csf.matrices(q, v)
    if np.linalg.cond(M) > COND_LIMIT:
        raise SingularMassMatrixError(f"mass matrix singular at q={np.ravel(q).tolist()}")
    return np.linalg.solve(M, G @ np.asarray(u, float) - c)


# -- symbolic linear algebra ----------------------------------------------------------

def _det(mat, rows, cols, memo):
    """Determinant of the submatrix ``mat[rows][:, cols]`` by cofactor expansion."""
    key = (rows, cols)
    if key in memo:
        return memo[key]
    if not rows:
        out = ONE
    elif len(rows) == 1:
        out = mat[rows[0]][cols[0]]
    else:
        terms = []
        r0, rest = rows[0], rows[1:]
        for n, col in enumerate(cols):
            entry = mat[r0][col]
            if entry is ZERO:
                continue
            minor = _det(mat, rest, cols[:n] + cols[n + 1:], memo)
            if minor is ZERO:
                continue
            t = mul(entry, minor)
            terms.append(neg(t) if n % 2 else t)
        out = add(*terms)
    memo[key] = out
    return out


def solve_symbolic(A, b, which=None):
    """Components ``which`` of ``A^-1 b`` via Cramer's rule (cofactor expansion)."""
    n = len(A)
    which = range(n) if which is None else which
    memo = {}
    idx = tuple(range(n))
    det = _det(A, idx, idx, memo)
    out = []
    for r in which:
        terms = []
        for i in range(n):
            if b[i] is ZERO:
                continue
            rows = idx[:i] + idx[i + 1:]
            cols = idx[:r] + idx[r + 1:]
            cof = _det(A, rows, cols, memo)
            if cof is ZERO:
                continue
            t = mul(cof, b[i])
            terms.append(neg(t) if (i + r) % 2 else t)
        out.append(div(add(*terms), det))
    return out, det


# -- promotion -------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GeneralizedSystem:
    """Dynamics ``dv~/dt = f~(q~, v~, u~, u~_[1], u~_[2])`` after promotion.

    ``u_names`` lists the promoted coordinates first, then the remaining
    forces.  The derivative of promoted input ``phi`` is named ``phi_d1``
    (and ``phi_d2``).  ``B_tilde`` holds the highest input derivative order
    entering ``f~`` per input.
    """

    csf: ClassicalStateForm
    selection: tuple
    q_names: tuple
    v_names: tuple
    u_names: tuple
    B_tilde: tuple
    rhs: tuple
    promoted_forces: tuple
    determinant: object

    @property
    def k(self):
        return len(self.selection)

    @property
    def n_state(self):
        return 2 * len(self.q_names)

    @property
    def sel_inputs(self):
        return [i for i, _ in self.selection]

    @property
    def sel_coords(self):
        return [c for _, c in self.selection]

    @property
    def unsel_coords(self):
        sel = set(self.sel_coords)
        return [i for i in range(self.csf.p) if i not in sel]

    @property
    def rest_inputs(self):
        sel = set(self.sel_inputs)
        return [i for i in range(self.csf.m) if i not in sel]

    def input_derivative_names(self, order):
        return [f"{n}_d{order}" for n in self.u_names[:self.k]]

    def assemble(self, qt, vt, ut, ut1, ut2):
        """Classical ``(q, v, a_sel, u_rest)`` from generalized quantities."""
        p, k = self.csf.p, self.k
        q = np.empty(p)
        v = np.empty(p)
        unsel = self.unsel_coords
        q[unsel] = qt
        v[unsel] = vt
        q[self.sel_coords] = ut[:k]
        v[self.sel_coords] = ut1[:k]
        return q, v, np.asarray(ut2[:k], float), np.asarray(ut[k:], float)

    def solve(self, qt, vt, ut, ut1=None, ut2=None, check=True):
        """Numeric mixed solve; returns ``(a_unsel, u_sel, cond)``.

        With ``check=False`` the condition number is skipped (reported as
        NaN) and only an exactly singular system raises."""
        k = self.k
        ut1 = np.zeros(k) if ut1 is None else ut1
        ut2 = np.zeros(k) if ut2 is None else ut2
        q, v, a_sel, u_rest = self.assemble(qt, vt, ut, ut1, ut2)
        M, G, c = self.csf.matrices(q, v)
        A = np.hstack([-G[:, self.sel_inputs], M[:, self.unsel_coords]])
        b = G[:, self.rest_inputs] @ u_rest - c - M[:, self.sel_coords] @ a_sel
        cond = np.nan
        if check:
            cond = np.linalg.cond(A)
            if not np.isfinite(cond) or cond > COND_LIMIT:
                raise InvalidPromotionError(
                    f"mixed system singular (cond={cond:.3g}) at q={q.tolist()}")
        try:
            z = np.linalg.solve(A, b)
        except np.linalg.LinAlgError:
            raise InvalidPromotionError(f"mixed system singular at q={q.tolist()}") from None
        return z[k:], z[:k], cond

    def f(self, qt, vt, ut, ut1=None, ut2=None):
        return self.solve(qt, vt, ut, ut1, ut2)[0]

    def classical_inputs(self, qt, vt, ut, ut1=None, ut2=None):
        """Full classical force vector reproducing the generalized motion."""
        _, u_sel, _ = self.solve(qt, vt, ut, ut1, ut2)
        u = np.empty(self.csf.m)
        u[self.sel_inputs] = u_sel
        u[self.rest_inputs] = np.asarray(ut, float)[self.k:]
        return u

    def variables(self):
        """Argument names of ``rhs``: state, inputs, input derivatives."""
        return (list(self.q_names) + list(self.v_names) + list(self.u_names)
                + self.input_derivative_names(1) + self.input_derivative_names(2))


def promote(csf, selection):
    """Promote coordinates to inputs.

    ``selection`` is a sequence of ``(input_index, coordinate_index)`` pairs
    (0-based): input ``u[i]`` is dropped and coordinate ``q[c]`` becomes an
    input.  Returns a :class:`GeneralizedSystem` whose ``rhs`` expresses the
    accelerations of the remaining coordinates symbolically.
    """
    sys = csf.system
    p, m = sys.p, sys.m
    selection = tuple((int(i), int(c)) for i, c in selection)
    k = len(selection)
    if k > m:
        raise InvalidPromotionError(f"cannot promote {k} coordinates with {m} inputs")
    ins = [i for i, _ in selection]
    coords = [c for _, c in selection]
    if len(set(ins)) != k or len(set(coords)) != k:
        raise InvalidPromotionError("promotion pairs must use distinct inputs and coordinates")
    for i, c in selection:
        if not (0 <= i < m and 0 <= c < p):
            raise InvalidPromotionError(f"promotion pair ({i}, {c}) out of range")
    unsel = [i for i in range(p) if i not in coords]
    rest = [i for i in range(m) if i not in ins]

    # rename promoted coordinate velocity/acceleration to input-derivative names
    ren = {}
    for c in coords:
        ren[sys.v[c]] = Var(f"{sys.q[c]}_d1")
    a_sel = [Var(f"{sys.q[c]}_d2") for c in coords]
    c_vec = substitute_many(list(csf.c), ren) if ren else list(csf.c)

    A = [[neg(csf.G[r][i]) for i in ins] + [csf.M[r][j] for j in unsel] for r in range(p)]
    b = []
    for r in range(p):
        terms = [mul(csf.G[r][i], Var(sys.u[i])) for i in rest]
        terms.append(neg(c_vec[r]))
        terms += [neg(mul(csf.M[r][c], a)) for c, a in zip(coords, a_sel)]
        b.append(simplify(add(*terms)))
    sol, det = solve_symbolic(A, b)
    rhs = tuple(sol[k:])
    forces = tuple(sol[:k])

    names = set().union(*(e.free for e in rhs)) if rhs else set()
    B = []
    for c in coords:
        qn = sys.q[c]
        order = 2 if f"{qn}_d2" in names else 1 if f"{qn}_d1" in names else 0
        B.append(order)
    B += [0] * len(rest)
    u_names = tuple(sys.q[c] for c in coords) + tuple(sys.u[i] for i in rest)
    gen = GeneralizedSystem(
        csf=csf, selection=selection,
        q_names=tuple(sys.q[i] for i in unsel),
        v_names=tuple(sys.v[i] for i in unsel),
        u_names=u_names, B_tilde=tuple(B), rhs=rhs,
        promoted_forces=forces, determinant=det,
    )
    log.debug("promoted %s -> inputs %s, B~=%s", selection, u_names, B)
    return gen


# -- equilibria -----------------------------------------------------------------------------

@dataclass(frozen=True)
class Equilibrium:
    q: np.ndarray
    u: np.ndarray
    residual: float
    y: np.ndarray = None


def find_equilibrium(csf, q_guess, u_guess, fixed=None, tol=1e-9, max_iter=50):
    """Solve ``G(q) u = dV/dq`` for a rest point ``(q_s, u_s)``.

    ``fixed`` maps coordinate or input names to values held constant.  With
    more unknowns than equations the minimum-norm Gauss-Newton step is
    taken, which keeps the solution close to the guess.
    """
    sys = csf.system
    fixed = dict(fixed or {})
    unknown = [n for n in list(sys.q) + list(sys.u) if n not in fixed]
    bad = set(fixed) - set(sys.q) - set(sys.u)
    if bad:
        raise MechanicsError(f"unknown fixed variables {sorted(bad)}")
    res = [sub(add(*[mul(sys.input_matrix[i][j], Var(sys.u[j])) for j in range(sys.m)]),
               diff(sys.potential, sys.q[i])) for i in range(sys.p)]
    jac = [diff(r, n) for r in res for n in unknown]
    allv = list(sys.q) + list(sys.u)
    fn = compile_exprs(res + jac, allv)
    z = dict(zip(sys.q, np.ravel(q_guess).astype(float)))
    z.update(zip(sys.u, np.ravel(u_guess).astype(float)))
    z.update(fixed)
    x = np.array([z[n] for n in unknown], float)
    p = sys.p

    def evaluate_at(x):
        z.update(zip(unknown, x))
        out = fn([z[n] for n in allv])
        return out[:p], out[p:].reshape(p, len(unknown))

    r, J = evaluate_at(x)
    for _ in range(max_iter):
        if np.max(np.abs(r)) <= tol:
            break
        step = np.linalg.lstsq(J, -r, rcond=None)[0]
        x = x + step
        r, J = evaluate_at(x)
    err = float(np.max(np.abs(r)))
    if not err <= tol:
        raise EquilibriumNotFoundError(
            f"no equilibrium found in {max_iter} iterations (residual {err:.3e})")
    z.update(zip(unknown, x))
    return Equilibrium(np.array([z[n] for n in sys.q]), np.array([z[n] for n in sys.u]), err)
