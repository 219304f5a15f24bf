import numpy as np
import pytest

from flatlin.errors import BranchSwitchError, ConvergenceError, FeedbackError
from flatlin.feedback import (
    SolverSettings, Workspace, dependence_report, evaluate_inputs, feedback,
    random_consistent_point, solve_psi, synthesize,
)
from flatlin.flatness import enumerate_kappa
from flatlin.mechanics import find_equilibrium


def _law(project):
    return synthesize(project.gen_map, enumerate_kappa(project.gen_map, project.y_s)[0],
                      project.y_s)


def test_unknowns(law1, law2):
    assert law1.unknowns == ["y1", "y1_d1", "y2", "y2_d1", "y3", "y3_d1"]
    # y1 carries no unknowns for (0, 2, 4)
    assert law2.unknowns == ["y2", "y2_d1", "y3", "y3_d1", "y3_d2", "y3_d3"]


def test_w_slot_consumption(law1, law2, manipulator):
    assert tuple(law2.w_input_count) == (5, 3, 1)
    assert tuple(law1.w_input_count) == (3, 3, 3)
    S = manipulator.gen_map.S
    for law in (law1, law2):
        assert all(c <= s - k + 1 for c, s, k in zip(law.w_input_count, S, law.kappa))


@pytest.mark.parametrize("which", ["law1", "law2"])
def test_equilibrium_is_a_fixed_point(which, request, manipulator):
    law = request.getfixturevalue(which)
    qt, vt = manipulator.gen_map.state(manipulator.y_s)
    res = solve_psi(law, qt, vt, law.equilibrium_w())
    assert res.residual <= 1e-10
    assert np.max(np.abs(res.x - law.equilibrium_guess())) <= 1e-12


@pytest.mark.parametrize("which", ["law1", "law2"])
def test_random_round_trip(which, request, rng):
    law = request.getfixturevalue(which)
    for _ in range(20):
        q, v, w, x = random_consistent_point(law, rng)
        res = solve_psi(law, q, v, w)
        assert res.residual <= 1e-10
        assert np.max(np.abs(res.x - x)) <= 1e-8


@pytest.mark.parametrize("which", ["law1", "law2"])
def test_hover_inputs_match_static_equilibrium(which, request, manipulator):
    law = request.getfixturevalue(which)
    qt, vt = manipulator.gen_map.state(manipulator.y_s)
    u = feedback(law, qt, vt, law.equilibrium_w())
    eq = find_equilibrium(manipulator.csf, list(qt) + [-1.5], [7.0, 7.0, 0.0],
                          fixed=dict(zip(("x_e", "z_e", "theta"), qt)))
    assert np.allclose(u, [eq.q[3], eq.u[0], eq.u[1]], rtol=1e-9, atol=1e-9)


def test_w_may_be_given_by_name(law2, manipulator):
    qt, vt = manipulator.gen_map.state(manipulator.y_s)
    by_name = feedback(law2, qt, vt, {"w1": 0.0})
    assert np.array_equal(by_name, feedback(law2, qt, vt, law2.equilibrium_w()))


@pytest.mark.parametrize("which", ["law1", "law2"])
def test_flat_consistency_along_reference(which, request, manipulator, transition):
    law, gm = request.getfixturevalue(which), manipulator.gen_map
    ws = Workspace(law, jump_floor=1.0)  # coarse grid: large steps are expected
    for t in np.linspace(0.0, 5.0, 41):
        jets = transition.jets(t)
        q, v = gm.state(jets)
        w = np.zeros_like(jets)
        for j, k in enumerate(law.kappa):
            w[j, :jets.shape[1] - k] = jets[j, k:]
        res = ws.solve(q, v, w)
        u = evaluate_inputs(law, res.x, law.w_vector(w))[0]
        expect = gm.evaluate_all(jets[:, :, None])[2][:, 0]
        assert np.max(np.abs(u - expect)) <= 1e-8 * (1 + np.max(np.abs(expect)))


def test_input_derivatives_match_jets(law2, manipulator, rng):
    gm = manipulator.gen_map
    q, v, w, x = random_consistent_point(law2, rng)
    u, d1, d2 = evaluate_inputs(law2, x, law2.w_vector(w), derivatives=True)
    jets = np.zeros((3, gm.max_order + 1))
    idx = 0
    for j, k in enumerate(law2.kappa):
        jets[j, :k] = x[idx:idx + k]
        jets[j, k:] = w[j, :gm.max_order + 1 - k]
        idx += k
    _, _, u_ref, d1_ref, d2_ref = gm.evaluate_all(jets[:, :, None])
    assert np.allclose(u, u_ref[:, 0], atol=1e-12)
    assert np.allclose(d1, d1_ref[:, 0], atol=1e-12) and np.allclose(d2, d2_ref[:, 0], atol=1e-12)


def test_manipulator_second_law_ignores_height(law2):
    rep = dependence_report(law2)
    assert rep.independent_of() == ["z_e", "v_ze"]
    sens = dict(zip(rep.state_names, rep.sensitivity))
    assert sens["z_e"] <= 1e-9 and sens["v_ze"] <= 1e-9
    assert all(sens[n] > 1e-6 for n in ("x_e", "theta", "v_xe", "omega_theta"))
    assert tuple(rep.w_slots) == (5, 3, 1)


def test_first_law_report_is_diagnostic(law1):
    d = dependence_report(law1, n_points=2).to_dict()
    assert d["state"] == ["x_e", "z_e", "theta", "v_xe", "v_ze", "omega_theta"]
    assert len(d["sensitivity"]) == 6 and d["w_slots"] == [3, 3, 3]


def test_toy_law_depends_on_everything(toy):
    rep = dependence_report(_law(toy))
    assert all(rep.depends)


def test_pendulum_law_ignores_velocity(pendulum):
    rep = dependence_report(_law(pendulum))
    assert rep.independent_of() == ["v"]


def test_toy_law_is_computed_torque(toy, rng):
    law = _law(toy)
    csf = toy.csf
    for _ in range(5):
        q, v, w, _ = random_consistent_point(law, rng, scale=0.3)
        u = feedback(law, q, v, w)
        M, G, c = csf.matrices(q, v)
        assert np.allclose(u, np.linalg.solve(G, M @ w[:, 0] + c), rtol=1e-10, atol=1e-10)


@pytest.mark.parametrize("which", ["law1", "law2"])
def test_solution_is_locally_unique(which, request, rng):
    law = request.getfixturevalue(which)
    q, v, w, x = random_consistent_point(law, rng)
    base = solve_psi(law, q, v, w).x
    for _ in range(5):
        guess = x + rng.uniform(-1e-2, 1e-2, x.shape)
        assert np.max(np.abs(solve_psi(law, q, v, w, guess).x - base)) <= 1e-9


def test_branch_jump_is_rejected(law1, manipulator, rng):
    ws = Workspace(law1)
    qt, vt = manipulator.gen_map.state(manipulator.y_s)
    ws.solve(qt, vt, law1.equilibrium_w())
    q, v, w, _ = random_consistent_point(law1, rng, scale=0.3)
    with pytest.raises(BranchSwitchError):
        ws.solve(q, v, w)
    # a trial solve does not move the workspace
    ws.solve(q, v, w, accept=False)
    assert np.array_equal(ws.x, law1.equilibrium_guess())


def test_iteration_budget_exhausted(law1, rng):
    q, v, w, _ = random_consistent_point(law1, rng, scale=0.3)
    tight = law1.with_settings(SolverSettings(max_iter=1))
    with pytest.raises(ConvergenceError) as info:
        solve_psi(tight, q, v, w)
    assert info.value.residual > 0


@pytest.mark.parametrize("kappa", [(2, 2, 0), (6, 0, 0), (2, 2)])
def test_inadmissible_kappa(manipulator, kappa):
    with pytest.raises(FeedbackError):
        synthesize(manipulator.gen_map, kappa, manipulator.y_s)
