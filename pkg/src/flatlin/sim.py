"""Reference planning, closed-loop simulation and linearization checks."""

import csv
import logging
from dataclasses import dataclass, field
from functools import cached_property
from math import comb
from pathlib import Path

import numpy as np
from numpy.polynomial import Polynomial

from .errors import EvaluationError, FlatlinError, SimulationError
from .expr import compile_exprs
from .feedback import Workspace, evaluate_inputs, solve_psi
from .jets import MultiIndex

log = logging.getLogger(__name__)


# -- reference trajectories -----------------------------------------------------------

def rest_to_rest_polynomial(boundary_order):
    """Polynomial ``p`` on ``[0, 1]`` with ``p(0)=0``, ``p(1)=1`` and
    derivatives ``1..boundary_order`` zero at both ends (degree ``2b+1``).

    Uses ``p(s) = s^(b+1) * sum_k C(b+k, k) (1-s)^k``; its coefficients are
    integers, so endpoint values and derivatives evaluate exactly.
    """
    b = int(boundary_order)
    if b < 0:
        raise SimulationError("boundary order must be non-negative", 0.0)
    coef = [0] * (2 * b + 2)
    for k in range(b + 1):
        ck = comb(b + k, k)
        for i in range(k + 1):
            coef[b + 1 + i] += ck * comb(k, i) * (-1) ** i
    return Polynomial([float(c) for c in coef])


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Per-component ``y^j(t) = y0 + (y1 - y0) p(t/T)`` on ``[0, T]``, held
    constant outside."""

    y_start: np.ndarray
    y_end: np.ndarray
    T: float
    shape: Polynomial
    max_order: int = 6

    @cached_property
    def _derivs(self):
        return [self.shape.deriv(a) if a else self.shape for a in range(self.max_order + 1)]

    @property
    def m(self):
        return len(self.y_start)

    def jets(self, t):
        """``(m, max_order+1)`` derivatives at scalar ``t`` or
        ``(m, max_order+1, len(t))`` at an array of times."""
        t = np.asarray(t, float)
        if self.T <= 0:
            s = np.where(t > 0, 1.0, 0.0)
        else:
            s = np.clip(t / self.T, 0.0, 1.0)
        inside = (t >= 0) & (t <= self.T)
        delta = (self.y_end - self.y_start)
        out = np.zeros((self.m, self.max_order + 1) + t.shape)
        for a, P in enumerate(self._derivs):
            if a == 0:
                val = P(s)
            elif self.T > 0:
                val = np.where(inside, P(s), 0.0) / self.T ** a
            else:
                val = np.zeros_like(s)
            out[:, a] = np.multiply.outer(delta, val) if t.shape else delta * val
        out[:, 0] += self.y_start.reshape((-1,) + (1,) * t.ndim)
        return out

    def w_jet(self, t, kappa):
        """New-input jet ``w^j_[b] = y^j_[kappa^j + b]`` (zero-padded)."""
        y = self.jets(t)
        w = np.zeros_like(y)
        for j, k in enumerate(kappa):
            w[j, :self.max_order + 1 - k] = y[j, k:]
        return w


def check_rest_point(fm, y, tol=1e-9):
    """Raise if the rest jet at ``y`` is not an equilibrium of the map's system."""
    m, l = fm.m, fm.max_order
    jets = np.zeros((m, l + 1, 1))
    jets[:, 0, 0] = y
    try:
        q, v, u, du1, du2 = fm.evaluate_all(jets)
    except (EvaluationError, FloatingPointError) as exc:
        raise SimulationError(f"flat map undefined at rest point {list(y)}: {exc}", 0.0) from None
    q, v, u = q[:, 0], v[:, 0], u[:, 0]
    residual = float(np.max(np.abs(v))) if len(v) else 0.0
    sys = fm.system
    if sys is not None and hasattr(sys, "f"):
        k = len(fm.u_derivs)
        residual = max(residual, float(np.max(np.abs(sys.f(q, v, u, np.zeros(k), np.zeros(k))))))
    elif sys is not None:
        residual = max(residual, float(np.max(np.abs(sys.residual(q, v, np.zeros_like(q), u)))))
    if not residual <= tol:
        raise SimulationError(f"{list(y)} is not an equilibrium (residual {residual:.3e})", 0.0)


def plan_rest_to_rest(fm, y_start, y_end, T, boundary_order=5, check=True):
    """Rest-to-rest reference between two flat-output rest points."""
    y_start = np.asarray(y_start, float).ravel()
    y_end = np.asarray(y_end, float).ravel()
    if y_start.shape != (fm.m,) or y_end.shape != (fm.m,):
        raise SimulationError(f"endpoints must have {fm.m} components", 0.0)
    if T < 0:
        raise SimulationError("transition time must be non-negative", 0.0)
    if check:
        check_rest_point(fm, y_start)
        check_rest_point(fm, y_end)
    shape = rest_to_rest_polynomial(boundary_order)
    return ReferenceTrajectory(y_start, y_end, float(T), shape, fm.max_order)


# -- trajectories ---------------------------------------------------------------------

@dataclass
class Trajectory:
    """Sampled run.  Arrays are indexed ``[k, component]`` with ``k`` the grid index."""

    t: np.ndarray
    q: np.ndarray
    v: np.ndarray
    u: np.ndarray
    y: np.ndarray
    q_names: tuple
    v_names: tuple
    u_names: tuple
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(np.diff(self.t) <= 0):
            raise SimulationError("time grid must be strictly increasing", float(self.t[0]))
        n = len(self.t)
        for name in ("q", "v", "u", "y"):
            if len(getattr(self, name)) != n:
                raise SimulationError(f"channel {name} has the wrong length", float(self.t[0]))
        for name, arr in self.diagnostics.items():
            if len(arr) != n:
                raise SimulationError(f"diagnostic {name} has the wrong length", float(self.t[0]))

    @property
    def state(self):
        return np.hstack([self.q, self.v])

    @property
    def dt(self):
        return float(self.t[1] - self.t[0]) if len(self.t) > 1 else 0.0

    def header(self):
        ys = [f"y{j + 1}" for j in range(self.y.shape[1])]
        return (["t", *self.q_names, *self.v_names, *self.u_names, *ys]
                + list(self.diagnostics))

    def write_csv(self, path):
        cols = [self.t[:, None], self.q, self.v, self.u, self.y]
        cols += [np.asarray(d)[:, None] for d in self.diagnostics.values()]
        data = np.hstack(cols)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.header())
            for row in data:
                w.writerow([repr(float(x)) for x in row])
        return Path(path)

    def write_plot_script(self, path, csv_name):
        """gnuplot script plotting states, inputs and flat outputs."""
        header = self.header()

        def block(names, title, out):
            cols = ", ".join(
                f"'{csv_name}' using 1:{header.index(n) + 1} with lines title '{n}'" for n in names)
            return f"set output '{out}'\nset title '{title}'\nplot {cols}\n"

        stem = Path(csv_name).stem
        text = ["set datafile separator ','", "set key autotitle columnhead",
                "set terminal pngcairo size 900,600", "set xlabel 't [s]'", ""]
        text.append(block(list(self.q_names) + list(self.v_names), "state", f"{stem}_state.png"))
        text.append(block(list(self.u_names), "inputs", f"{stem}_inputs.png"))
        text.append(block([f"y{j + 1}" for j in range(self.y.shape[1])], "flat output",
                          f"{stem}_flat.png"))
        Path(path).write_text("\n".join(text))
        return Path(path)


def _flat_output_fn(fm):
    csf = fm.system.csf if hasattr(fm.system, "csf") else fm.system
    return compile_exprs(list(fm.flat_output), list(csf.system.q))


def _full_configuration(gen, qt, ut):
    if not hasattr(gen, "assemble"):
        return np.asarray(qt, float)
    k = gen.k
    q, _, _, _ = gen.assemble(qt, np.zeros_like(qt), ut, np.zeros(k), np.zeros(k))
    return q


# -- closed loop -------------------------------------------------------------------------

def input_loop_gain(gen, law, qt, vt, w, h=1e-6):
    """Spectral radius of ``d u_sel / d q~ . d v~' / d u_sel_[2]``.

    Differencing the promoted inputs along the closed loop (strategy B)
    feeds their second derivative back into itself through the
    configuration.  One step of that loop has a parasitic mode
    ``-g / (2 - g)``, so the scheme is stable only for a gain ``g < 1``.
    """
    k, n = gen.k, len(qt)
    if k == 0:
        return 0.0
    wv = w if isinstance(w, list) else law.w_vector(w)
    qt, vt = np.asarray(qt, float), np.asarray(vt, float)
    base = solve_psi(law, qt, vt, wv)
    dq = np.zeros((k, n))
    for i in range(n):
        e = np.zeros(n)
        e[i] = h
        hi = evaluate_inputs(law, solve_psi(law, qt + e, vt, wv, base.x).x, wv)[0]
        lo = evaluate_inputs(law, solve_psi(law, qt - e, vt, wv, base.x).x, wv)[0]
        dq[:, i] = (hi[:k] - lo[:k]) / (2 * h)
    u, d1, d2 = evaluate_inputs(law, base.x, wv, derivatives=True)
    dd = np.zeros((n, k))
    for c in range(k):
        e = np.zeros(k)
        e[c] = h
        dd[:, c] = (gen.f(qt, vt, u, d1, d2 + e) - gen.f(qt, vt, u, d1, d2 - e)) / (2 * h)
    return float(np.max(np.abs(np.linalg.eigvals(dq @ dd))))


def simulate_closed_loop(gen, law, ref, x0=None, T=None, dt=1e-3, strategy="A",
                         history=5, tol=1e-11, max_iter=20):
    """Integrate the generalized system under the quasi-static law with RK4.

    The promoted inputs' time derivatives come either from the flat map's
    total derivatives on the completed jets (strategy ``"A"``) or from the
    polynomial through the last ``history - 1`` accepted promoted inputs and
    the one at the end of the step (strategy ``"B"``, bootstrapped with
    ``"A"``).  Strategy B is implicit in that newest sample, which is found
    by Newton iteration so that the law reproduces it at the new state.  An
    explicit stencil over past samples alone feeds the stencil's ``1/dt^2``
    weight back through the dynamics and diverges.  Even the implicit
    scheme needs an input loop gain below one (see :func:`input_loop_gain`);
    otherwise strategy B is refused.
    """
    if strategy not in ("A", "B"):
        raise SimulationError(f"unknown strategy {strategy!r}", 0.0)
    fm = law.fm
    n, k = fm.n, len(fm.u_derivs)
    T = ref.T if T is None else float(T)
    steps = int(round(T / dt))
    if steps < 1:
        raise SimulationError("need at least one integration step", 0.0)
    t_grid = np.arange(steps + 1) * dt
    if x0 is None:
        q0, v0 = fm.state(ref.jets(0.0))
        x0 = np.concatenate([q0, v0])
    x = np.array(x0, float)
    ws = Workspace(law)
    if strategy == "B" and k:
        try:
            gain = input_loop_gain(gen, law, x[:n], x[n:], ref.w_jet(0.0, law.kappa))
        except FlatlinError as exc:
            raise SimulationError(f"{type(exc).__name__}: {exc}", 0.0) from exc
        if gain >= 1.0:
            raise SimulationError(
                f"strategy B is unstable for kappa {law.kappa}: input loop gain "
                f"{gain:.3f} >= 1; use strategy A", 0.0)
    # new-input jets at every RK4 stage time (the half-step grid)
    jw, bw = law.w_index
    W = ref.w_jet(np.arange(2 * steps + 1) * (dt / 2), law.kappa)[jw, bw, :].T

    def law_at(t, x, accept=False):
        wv = W[int(round(2 * t / dt))].tolist()
        res = ws.solve(x[:n], x[n:], wv, accept=accept)
        u, du1, du2 = evaluate_inputs(law, res.x, wv, derivatives=True)
        return u, du1, du2, res

    def accel(x, u, du1, du2, check=False):
        a, _, cond = gen.solve(x[:n], x[n:], u, du1, du2, check=check)
        return np.concatenate([x[n:], a]), cond

    def rk4(t, x, k1, derivs):
        def stage(s, y):
            u, d1, d2, _ = law_at(s, y)
            if derivs is not None:
                d1, d2 = derivs(s)
            return accel(y, u, d1, d2)[0]
        k2 = stage(t + dt / 2, x + dt / 2 * k1)
        k3 = stage(t + dt / 2, x + dt / 2 * k2)
        k4 = stage(t + dt, x + dt * k3)
        return x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)

    def implicit_step(t, x, u):
        past_t, past_u = t_grid[i - history + 2:i + 1], U[i - history + 2:i + 1, :k]
        ts = np.append(past_t, t + dt)

        def advance(p):
            coef = np.linalg.solve(np.vander(ts - t, len(ts), increasing=True),
                                   np.vstack([past_u, p]))

            def derivs(s):
                h = s - t
                pw = h ** np.arange(len(ts))
                d1 = sum(j * coef[j] * pw[j - 1] for j in range(1, len(ts)))
                d2 = sum(j * (j - 1) * coef[j] * pw[j - 2] for j in range(2, len(ts)))
                return d1, d2

            k1 = accel(x, u, *derivs(t))[0]
            x_new = rk4(t, x, k1, derivs)
            return law_at(t + dt, x_new)[0][:k] - p, x_new

        guess = np.polynomial.polynomial.polyval(
            dt, np.polynomial.polynomial.polyfit(past_t - t, past_u, len(past_t) - 1))
        p = np.atleast_1d(guess)
        r, x_new = advance(p)
        J = chord[0]
        for _ in range(max_iter):
            if np.max(np.abs(r)) <= tol * (1.0 + np.max(np.abs(p))):
                return x_new
            if J is None:
                eps = 1e-7 * (1.0 + np.abs(p))
                J = np.column_stack([(advance(p + eps[c] * np.eye(k)[c])[0] - r) / eps[c]
                                     for c in range(k)])
                chord[0] = J
            p = p - np.linalg.solve(J, r)
            r_new, x_new = advance(p)
            if np.max(np.abs(r_new)) > 0.5 * np.max(np.abs(r)):
                J = chord[0] = None     # stale chord: rebuild
            r = r_new
        raise SimulationError("implicit input-derivative step did not converge", float(t))

    chord = [None]
    N = steps + 1
    Q, V = np.zeros((N, n)), np.zeros((N, n))
    U = np.zeros((N, len(fm.Fu)))
    psi_res, cond_hist = np.zeros(N), np.zeros(N)
    for i, t in enumerate(t_grid):
        try:
            u, du1, du2, res = law_at(t, x, accept=True)
            k1, cond = accel(x, u, du1, du2, check=True)
            implicit = strategy == "B" and k and i >= history - 2
            Q[i], V[i], U[i] = x[:n], x[n:], u
            psi_res[i], cond_hist[i] = res.residual, cond
            if i == steps:
                break
            x = implicit_step(t, x, u) if implicit else rk4(t, x, k1, None)
        except FlatlinError as exc:
            if isinstance(exc, SimulationError):
                raise
            raise SimulationError(f"{type(exc).__name__}: {exc}", float(t)) from exc
        if not np.all(np.isfinite(x)):
            raise SimulationError("state became non-finite", float(t + dt))
    phi = _flat_output_fn(fm)
    Y = np.array([phi(_full_configuration(gen, Q[i], U[i])) for i in range(N)])
    log.info("closed loop: %d steps, max psi residual %.2e", steps, psi_res.max())
    return Trajectory(t_grid, Q, V, U, Y, fm.q_names, fm.v_names, fm.u_names,
                      {"psi_residual": psi_res, "mixed_cond": cond_hist})


# -- verification -----------------------------------------------------------------------

def central_stencil(order, accuracy):
    """Offsets and weights of a central difference for the ``order``-th
    derivative with the given (even) accuracy order."""
    half = (order - 1) // 2 + (accuracy + 1) // 2
    offs = np.arange(-half, half + 1)
    V = np.vander(offs.astype(float), len(offs), increasing=True).T
    rhs = np.zeros(len(offs))
    rhs[order] = float(np.prod(np.arange(1, order + 1)))
    return offs, np.linalg.solve(V, rhs)


def default_stride(order, dt, floor=1e-12):
    """Sample stride keeping the difference step near ``floor**(1/(order+2))``,
    which balances truncation against rounding for an ``order``-th derivative."""
    if order <= 2:
        return 1
    h = floor ** (1.0 / (order + 2))
    return max(1, int(round(h / dt)))


def numerical_derivative(y, dt, order, stride=None, accuracy=None):
    """Central difference of a uniform sample; returns ``(values, valid)``
    where ``valid`` masks interior samples with a full stencil."""
    y = np.asarray(y, float)
    if order == 0:
        return y.copy(), np.ones(len(y), bool)
    stride = default_stride(order, dt) if stride is None else stride
    accuracy = 2 if accuracy is None else accuracy
    offs, wts = central_stencil(order, accuracy)
    h = stride * dt
    reach = int(offs.max()) * stride
    out = np.full(len(y), np.nan)
    valid = np.zeros(len(y), bool)
    if len(y) > 2 * reach:
        acc = np.zeros(len(y) - 2 * reach)
        for o, c in zip(offs, wts):
            acc += c * y[reach + o * stride:len(y) - reach + o * stride]
        out[reach:len(y) - reach] = acc / h ** order
        valid[reach:len(y) - reach] = True
    return out, valid


@dataclass(frozen=True)
class LinearizationReport:
    kappa: MultiIndex
    max_rel_error: tuple
    max_abs_error: tuple
    strides: tuple
    n_interior: tuple
    tol: float

    @property
    def passed(self):
        return all(e <= self.tol for e in self.max_rel_error)

    def to_dict(self):
        return {"kappa": list(self.kappa), "max_rel_error": list(self.max_rel_error),
                "max_abs_error": list(self.max_abs_error), "strides": list(self.strides),
                "n_interior": list(self.n_interior), "tol": self.tol, "passed": self.passed}


def verify_linearization(traj, kappa, ref, tol=1e-3, strides=None, clip=None):
    """Compare ``d^kappa^j y^j / dt^kappa^j`` along ``traj`` with ``w^j``.

    Errors are normalized by ``max |w^j|`` over the grid (absolute when the
    new input vanishes identically).  ``clip`` extra samples are dropped at
    each end in addition to the stencil reach.
    """
    kappa = MultiIndex(kappa)
    dt = traj.dt
    w_all = ref.w_jet(traj.t, kappa)[:, 0, :]
    rel, ab, used_strides, counts = [], [], [], []
    for j, kj in enumerate(kappa):
        stride = None if strides is None else strides[j]
        d, valid = numerical_derivative(traj.y[:, j], dt, kj, stride)
        if clip:
            valid[:clip] = valid[len(valid) - clip:] = False
        w = w_all[j]
        err = np.abs(d[valid] - w[valid])
        scale = float(np.max(np.abs(w))) if len(w) else 0.0
        e_abs = float(err.max()) if err.size else 0.0
        ab.append(e_abs)
        rel.append(e_abs / scale if scale > 1e-12 else e_abs)
        used_strides.append(default_stride(kj, dt) if stride is None else stride)
        counts.append(int(valid.sum()))
    return LinearizationReport(kappa, tuple(rel), tuple(ab), tuple(used_strides),
                               tuple(counts), tol)


def flat_side_rollout(fm, kappa, ref, T=None, dt=1e-3, tol=1e-6, check=True):
    """Reference state and input from the integrator chains ``y_[kappa] = w``.

    With a polynomial reference the chains integrate in closed form, so the
    flat-output jets are the reference's own.  They are mapped through the
    flat map; with ``check`` the generalized dynamics residual is verified.
    """
    T = ref.T if T is None else float(T)
    steps = int(round(T / dt))
    t = np.arange(steps + 1) * dt
    jets = ref.jets(t)
    # chains: y_[a] for a < kappa integrates w, which the polynomial does exactly
    try:
        with np.errstate(all="raise"):
            q, v, u, du1, du2 = fm.evaluate_all(jets)
    except (EvaluationError, FloatingPointError) as exc:
        raise SimulationError(f"flat map evaluation failed along the path: {exc}", 0.0) from None
    q, v, u = q.T, v.T, u.T
    residual = np.zeros(len(t))
    sys = fm.system
    if check and sys is not None and hasattr(sys, "solve"):
        a_fn = compile_exprs(list(fm.Fa), fm.jet_names, backend="numpy")
        acc = a_fn([jets[j, b] for j in range(fm.m) for b in range(fm.max_order + 1)]).T
        du1, du2 = du1.T, du2.T
        for i in range(len(t)):
            f = sys.f(q[i], v[i], u[i], du1[i], du2[i])
            residual[i] = np.max(np.abs(acc[i] - f)) / (1.0 + np.max(np.abs(f)))
        worst = int(np.argmax(residual))
        if residual[worst] > tol:
            raise SimulationError(
                f"generalized dynamics residual {residual[worst]:.3e} exceeds {tol:g}",
                float(t[worst]))
    y = jets[:, 0, :].T
    return Trajectory(t, q, v, u, y, fm.q_names, fm.v_names, fm.u_names,
                      {"dynamics_residual": residual})


def power_balance(gen, traj, du1=None, du2=None):
    """Relative mismatch between the energy change of the classical
    reconstruction and the work done by the classical forces.

    The promoted inputs' derivatives default to finite differences of the
    sampled inputs.  Returns ``(max_mismatch / energy_scale, energy, work)``.
    """
    csf = gen.csf
    k = gen.k
    dt = traj.dt
    if k and du1 is None:
        du1 = np.gradient(traj.u[:, :k], dt, axis=0, edge_order=2)
        du2 = np.gradient(du1, dt, axis=0, edge_order=2)
    E = np.zeros(len(traj.t))
    P = np.zeros(len(traj.t))
    for i in range(len(traj.t)):
        d1 = du1[i] if k else np.zeros(0)
        d2 = du2[i] if k else np.zeros(0)
        q, v, _, _ = gen.assemble(traj.q[i], traj.v[i], traj.u[i], d1, d2)
        u = gen.classical_inputs(traj.q[i], traj.v[i], traj.u[i], d1, d2)
        E[i] = csf.energy(q, v)
        P[i] = csf.power(q, v, u)
    work = np.concatenate([[0.0], np.cumsum(0.5 * (P[1:] + P[:-1]) * dt)])
    scale = max(float(np.max(np.abs(E - E[0]))), float(np.max(np.abs(work))), 1e-12)
    mismatch = float(np.max(np.abs(E - E[0] - work))) / scale
    return mismatch, E, work
