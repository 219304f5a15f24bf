"""The eight acceptance criteria.  Each test prints one PASS/FAIL line, and
the lines are repeated in the terminal summary."""

import time

import numpy as np
import pytest

import test_expr
import test_jets
from conftest import ACCEPTANCE_LINES
from flatlin.feedback import dependence_report
from flatlin.flatness import (
    admissible_kappas, brute_force_kappa, certify, enumerate_kappa, equilibrium_jacobian, verify_lemma1,
)
from flatlin.jets import make_equilibrium
from flatlin.project import Project
from flatlin.sim import verify_linearization


def record(number, title, ok, detail=""):
    line = f"[{'PASS' if ok else 'FAIL'}] {number}. {title}" + (f": {detail}" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def test_1_manipulator_chain_lengths():
    start = time.perf_counter()
    pr = Project("builtin:manipulator")
    cands = enumerate_kappa(pr.gen_map, pr.y_s)
    elapsed = time.perf_counter() - start
    case_i = {tuple(c.kappa) for c in cands if c.case == "i"}
    case_ii = {tuple(c.kappa) for c in cands if c.case == "ii"}
    ok = case_i == {(2, 2, 2)} and (0, 2, 4) in case_ii and elapsed < 5.0
    record(1, "chain lengths (2,2,2) case i and (0,2,4) case ii", ok,
           f"{len(cands)} candidates in {elapsed:.2f} s")


def test_2_generalized_jacobian_structure(manipulator):
    rng = np.random.default_rng(2024)
    mask = np.zeros((3, 3), bool)
    mask[0, 0] = mask[0, 2] = True
    worst_eye = worst_off = 0.0
    for heading in rng.uniform(-np.pi, np.pi, 10):
        rep = equilibrium_jacobian(manipulator.gen_map, [0.2, -0.1, heading])
        worst_eye = max(worst_eye, np.max(np.abs(rep.dq[0] - np.eye(3))))
        worst_off = max(worst_off, np.max(np.abs(rep.dq[2][~mask])))
    ok = worst_eye <= 1e-9 and worst_off <= 1e-9
    record(2, "equilibrium Jacobian structure over 10 headings", ok,
           f"|dFq/dy - I| = {worst_eye:.1e}, off-pattern [2] block = {worst_off:.1e}")


def test_3_equilibrium_jacobian_lemma(manipulator, toy):
    worst = []
    # full rank p - 1 for the underactuated arm; the toy has m = p outputs
    ok = manipulator.m == manipulator.system.p - 1
    for pr in (manipulator, toy):
        rep = equilibrium_jacobian(pr.flat_map, pr.y_s)
        res = verify_lemma1(rep)
        ok &= (res.passed and rep.zero_block_max <= 1e-9 and rep.velocity_block_error <= 1e-9
               and rep.rank_y == pr.m and rep.rank_y2 <= 1)
        worst.append(max(rep.zero_block_max, rep.velocity_block_error))
    record(3, "equilibrium Jacobian checks on manipulator and toy", ok,
           f"worst block error {max(worst):.1e}")


def test_4_enumeration_is_exhaustive(manipulator):
    gm = manipulator.gen_map
    start = time.perf_counter()
    brute = brute_force_kappa(manipulator.gen_map, manipulator.y_s)
    emitted = {c.kappa for c in enumerate_kappa(manipulator.gen_map, manipulator.y_s)}
    elapsed = time.perf_counter() - start
    ok = brute == emitted and elapsed < 30.0
    record(4, "enumeration equals brute-force regularity scan", ok,
           f"{len(brute)} regular of {len(admissible_kappas(gm.R, 2 * gm.n))} admissible "
           f"indices, {elapsed:.2f} s")


@pytest.mark.parametrize("which, kappa", [("run1", (2, 2, 2)), ("run2", (0, 2, 4))])
def test_5_exact_linearization(which, kappa, request, manipulator, transition):
    run = request.getfixturevalue(which)
    rep = verify_linearization(run, kappa, transition)
    gm = manipulator.gen_map
    target = np.concatenate(gm.state(make_equilibrium(gm.m, transition.y_end, gm.max_order)))
    final = float(np.max(np.abs(run.state[-1] - target)))
    ok = rep.passed and max(rep.max_rel_error) <= 1e-3 and final <= 1e-5
    record(5, f"exact linearization for kappa {kappa}", ok,
           f"max rel error {max(rep.max_rel_error):.1e}, final state error {final:.1e}")


def test_6_feedback_signature(law2):
    rep = dependence_report(law2)
    sens = dict(zip(rep.state_names, rep.sensitivity))
    ok = (rep.independent_of() == ["z_e", "v_ze"] and sens["z_e"] <= 1e-9
          and sens["v_ze"] <= 1e-9 and tuple(rep.w_slots) == (5, 3, 1))
    record(6, "kappa (0,2,4) law ignores z_e and v_ze, consumes w slots (5,3,1)", ok,
           f"sensitivities {sens['z_e']:.1e}, {sens['v_ze']:.1e}")


def test_7_flat_map_certificate(manipulator):
    cert = certify(manipulator.flat_map, n_points=50, seed=7, center=manipulator.cfg.equilibrium)
    gm = manipulator.gen_map
    ok = (cert.dynamics_residual <= 1e-8 and tuple(gm.R) == (4, 4, 4)
          and tuple(gm.S) == (4, 4, 4))
    record(7, "flat map certified, orders (4,4,4)", ok,
           f"dynamics residual {cert.dynamics_residual:.1e}")


def test_8_numeric_foundations():
    test_expr.test_diff_matches_central_difference()
    test_jets.test_total_derivative_is_a_derivation()
    record(8, "derivative and Leibniz properties on 1000 cases each", True)
