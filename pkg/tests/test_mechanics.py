import math

import numpy as np
import pytest

from flatlin.errors import (
    EquilibriumNotFoundError, InvalidPromotionError, NonSymmetricMetricError,
    SingularMassMatrixError,
)
from flatlin.expr import Const, compile_exprs, parse
from flatlin.mechanics import (
    LagrangianSystem, classical_rhs, euler_lagrange, find_equilibrium, promote,
)


def _system(q, metric, potential, G):
    v = [f"v{n}" for n in q]
    u = [f"u{j}" for j in range(len(G[0]))]
    P = lambda s: parse(s) if isinstance(s, str) else Const(s)  # noqa: E731
    return LagrangianSystem(q, v, u, [[P(e) for e in row] for row in metric], P(potential),
                            [[P(e) for e in row] for row in G])


def rk4(f, x, dt, steps):
    for _ in range(steps):
        k1 = f(x)
        k2 = f(x + dt / 2 * k1)
        k3 = f(x + dt / 2 * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x


# -- Euler-Lagrange ------------------------------------------------------------------

def test_pendulum_implicit_form(pendulum, rng):
    csf = pendulum.csf
    for q in rng.uniform(-3, 3, 5):
        v = rng.uniform(-2, 2)
        M, G, c = csf.matrices([q], [v])
        assert M[0, 0] == 1.0 and G[0, 0] == 1.0
        assert c[0] == pytest.approx(math.sin(q), abs=1e-15)


def test_free_particle_has_no_bias_terms():
    csf = euler_lagrange(_system(["a", "b"], [[1, 0], [0, 1]], 0, [[1, 0], [0, 1]]))
    assert all(e is Const(0.0) for e in csf.c)


def _numeric_el_residual(sys, q, v, a, u, h=1e-3):
    """M a + C - G u from finite differences of the Lagrangian alone."""
    p = len(q)
    gfn = compile_exprs([e for row in sys.metric for e in row] + [sys.potential], list(sys.q))
    Gfn = compile_exprs([e for row in sys.input_matrix for e in row], list(sys.q))

    def L(qq, vv):
        out = gfn(qq)
        g = out[:p * p].reshape(p, p)
        return 0.5 * vv @ g @ vv - out[-1]

    E = np.eye(p)
    Hvv = np.array([[(L(q, v + h * (E[i] + E[j])) - L(q, v + h * (E[i] - E[j]))
                      - L(q, v - h * (E[i] - E[j])) + L(q, v - h * (E[i] + E[j]))) / (4 * h * h)
                     for j in range(p)] for i in range(p)])
    Hvq = np.array([[(L(q + h * E[k], v + h * E[i]) - L(q - h * E[k], v + h * E[i])
                      - L(q + h * E[k], v - h * E[i]) + L(q - h * E[k], v - h * E[i])) / (4 * h * h)
                     for k in range(p)] for i in range(p)])
    dLdq = np.array([(L(q + h * E[i], v) - L(q - h * E[i], v)) / (2 * h) for i in range(p)])
    G = Gfn(q).reshape(p, -1)
    terms = (Hvv @ a, Hvq @ v, dLdq, G @ u)
    return terms[0] + terms[1] - terms[2] - terms[3], max(np.max(np.abs(t)) for t in terms)


def test_manipulator_equations_match_numeric_lagrangian(manipulator, rng):
    sys, csf = manipulator.system, manipulator.csf
    for _ in range(100):
        q = rng.uniform(-1, 1, 4)
        v = rng.uniform(-1, 1, 4)
        u = rng.uniform(-5, 5, 3)
        a = classical_rhs(csf, q, v, u)
        res, scale = _numeric_el_residual(sys, q, v, a, u)
        assert np.max(np.abs(res)) <= 1e-6 * (1 + scale)


def test_classical_rhs_round_trip(manipulator, rng):
    csf = manipulator.csf
    for _ in range(50):
        q, v, u = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4), rng.uniform(-5, 5, 3)
        a = classical_rhs(csf, q, v, u)
        assert np.max(np.abs(csf.residual(q, v, a, u))) <= 1e-10


def test_pendulum_rhs(pendulum):
    assert classical_rhs(pendulum.csf, [0.0], [0.0], [0.0])[0] == 0.0
    assert classical_rhs(pendulum.csf, [math.pi / 2], [0.0], [0.0])[0] == pytest.approx(-1.0)


def test_manipulator_at_hover_is_at_rest(manipulator):
    q, v = manipulator.flat_map.state(manipulator.y_s)
    u = manipulator.gen_map.evaluate_all(np.zeros((3, 7, 1)))[2][:, 0]
    u_classical = manipulator.gen.classical_inputs(q[:3], v[:3], u, [0.0], [0.0])
    assert np.max(np.abs(classical_rhs(manipulator.csf, q, v, u_classical))) <= 1e-12


def test_singular_mass_matrix():
    csf = euler_lagrange(_system(["a"], [["a^2"]], 0, [[1]]))
    with pytest.raises(SingularMassMatrixError):
        classical_rhs(csf, [0.0], [0.0], [1.0])


def test_non_symmetric_metric_names_entry():
    with pytest.raises(NonSymmetricMetricError) as info:
        _system(["a", "b"], [[1, "a"], [0, 1]], 0, [[1], [0]])
    assert "[1,2]" in str(info.value)


def test_energy_is_conserved_without_inputs(manipulator):
    csf = manipulator.csf
    f = lambda x: np.concatenate([x[4:], classical_rhs(csf, x[:4], x[4:], np.zeros(3))])  # noqa: E731
    x0 = np.array([0.1, -0.2, 0.4, -1.2, 0.3, -0.1, 0.5, 0.2])
    x1 = rk4(f, x0, 1e-3, 1000)
    e0, e1 = csf.energy(x0[:4], x0[4:]), csf.energy(x1[:4], x1[4:])
    assert abs(e1 - e0) <= 1e-8 * max(1.0, abs(e0))


def test_input_power_is_energy_rate(manipulator, rng):
    csf = manipulator.csf
    q, v, u = rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 4), rng.uniform(-5, 5, 3)
    a = classical_rhs(csf, q, v, u)
    h = 1e-6
    rate = (csf.energy(q + h * v, v + h * a) - csf.energy(q - h * v, v - h * a)) / (2 * h)
    assert rate == pytest.approx(csf.power(q, v, u), rel=1e-6, abs=1e-8)


# -- promotion ---------------------------------------------------------------------------

def test_promotion_shape(manipulator):
    gen = manipulator.gen
    assert gen.k == 1 and gen.n_state == 6
    assert list(gen.q_names) + list(gen.v_names) == [
        "x_e", "z_e", "theta", "v_xe", "v_ze", "omega_theta"]
    assert list(gen.u_names) == ["phi", "F1", "F2"]
    assert tuple(gen.B_tilde) == (2, 0, 0)


def test_promoted_dependencies(manipulator):
    gen = manipulator.gen
    expected = {"theta", "omega_theta", "phi", "phi_d1", "phi_d2", "F1", "F2"}
    rows = dict(zip(gen.v_names, gen.rhs))
    assert rows["v_xe"].free == expected
    assert rows["v_ze"].free == expected
    # the arm row depends on theta only through the gripper's gravity torque
    assert rows["omega_theta"].free <= expected


def test_arm_row_loses_theta_without_gripper_offset(config_text, make_project, rng):
    text = config_text("manipulator").replace("l_g = 0.25", "l_g = 0.0")
    gen = make_project(text).gen
    names = gen.variables()
    fn = compile_exprs([gen.rhs[2]], names)
    i = names.index("theta")
    for _ in range(20):
        x = rng.uniform(-1, 1, len(names))
        up, dn = x.copy(), x.copy()
        up[i] += 1e-5
        dn[i] -= 1e-5
        assert abs(fn(up)[0] - fn(dn)[0]) / 2e-5 <= 1e-8


def test_symbolic_and_numeric_promotion_agree(manipulator, rng):
    gen = manipulator.gen
    fn = compile_exprs(list(gen.rhs), gen.variables())
    for _ in range(20):
        x = rng.uniform(-1, 1, len(gen.variables()))
        x[7:9] += 7.0
        qt, vt, ut, d1, d2 = x[:3], x[3:6], x[6:9], x[9:10], x[10:11]
        assert np.allclose(fn(x), gen.f(qt, vt, ut, d1, d2), rtol=1e-10, atol=1e-10)


def test_no_promotion_is_identity(toy, rng):
    gen = promote(toy.csf, [])
    assert gen.k == 0 and tuple(gen.B_tilde) == (0, 0)
    for _ in range(10):
        q, v, u = rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2), rng.uniform(-1, 1, 2)
        assert np.allclose(gen.f(q, v, u), classical_rhs(toy.csf, q, v, u), rtol=1e-12)


def test_unactuated_promotion_is_rejected():
    csf = euler_lagrange(_system(["a", "b"], [[1, 0], [0, 1]], 0, [[0], [1]]))
    with pytest.raises(InvalidPromotionError):
        gen = promote(csf, [(0, 0)])
        gen.solve([0.0], [0.0], [0.0], [0.0], [0.0])


def test_generalized_motion_reproduced_by_classical_forces(manipulator, transition):
    """Forces reconstructed from a flat-side trajectory drive the classical
    model along the same path."""
    gm, gen, csf = manipulator.gen_map, manipulator.gen, manipulator.csf
    dt, t0, steps = 1e-3, 2.0, 300
    times = t0 + np.arange(2 * steps + 1) * dt / 2
    qt, vt, ut, d1, d2 = gm.evaluate_all(transition.jets(times))
    forces = [gen.classical_inputs(qt[:, i], vt[:, i], ut[:, i], d1[:, i], d2[:, i])
              for i in range(len(times))]

    def full(i):
        q, v, _, _ = gen.assemble(qt[:, i], vt[:, i], ut[:, i], d1[:, i], d2[:, i])
        return np.concatenate([q, v])

    x = full(0)
    for s in range(steps):
        f = lambda x, i: np.concatenate([x[4:], classical_rhs(csf, x[:4], x[4:], forces[i])])  # noqa: E731
        k1 = f(x, 2 * s)
        k2 = f(x + dt / 2 * k1, 2 * s + 1)
        k3 = f(x + dt / 2 * k2, 2 * s + 1)
        k4 = f(x + dt * k3, 2 * s + 2)
        x = x + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    assert np.max(np.abs(x - full(2 * steps))) <= 1e-6


# -- equilibria ----------------------------------------------------------------------------

def test_pendulum_hanging_equilibrium(pendulum):
    eq = find_equilibrium(pendulum.csf, [0.3], [0.1], fixed={"u": 0.0})
    assert eq.q[0] == pytest.approx(0.0, abs=1e-9) and eq.u[0] == 0.0


def test_pendulum_equilibrium_with_fixed_torque(pendulum):
    eq = find_equilibrium(pendulum.csf, [0.3], [0.0], fixed={"u": 0.5})
    assert eq.q[0] == pytest.approx(math.pi / 6, abs=1e-9)
    assert eq.residual <= 1e-9


def test_pendulum_infeasible_torque(pendulum):
    with pytest.raises(EquilibriumNotFoundError):
        find_equilibrium(pendulum.csf, [0.3], [0.0], fixed={"u": 1.5})


def test_manipulator_hover(manipulator):
    csf = manipulator.csf
    p = manipulator.cfg.parameters
    eq = find_equilibrium(csf, [0.0, -0.1, 0.0, -1.5], [7.0, 7.0, 0.0],
                          fixed={"x_e": 0.0, "z_e": -0.1, "theta": 0.0})
    assert np.max(np.abs(csf.residual(eq.q, np.zeros(4), np.zeros(4), eq.u))) <= 1e-9
    assert eq.q[3] == pytest.approx(-math.pi / 2, abs=1e-9)
    assert eq.u[0] + eq.u[1] == pytest.approx(p["M"] * p["grav"], rel=1e-9)
