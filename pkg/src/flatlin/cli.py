"""Command-line interface: ``flatlin {analyze,kappa,synthesize,simulate,plan}``.

Exit codes: 0 success, 2 invalid input, 3 a structural condition fails
(no admissible chain lengths, Lemma-style Jacobian checks), 4 numeric failure.
The log level comes from ``FLATLIN_LOG_LEVEL`` (default ``WARNING``).
"""

import argparse
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError
from .errors import (
    BranchSwitchError, ConvergenceError, EvaluationError, FlatlinError, FlatnessError,
    MechanicsError, NonSymmetricMetricError, ParameterizationError, SimulationError,
    SingularJacobianError,
)
from .expr import to_string
from .feedback import dependence_report, feedback, synthesize
from .flatness import (
    check_regularity, equilibrium_jacobian, enumerate_kappa, verify_lemma1,
)
from .jets import MultiIndex
from .project import Project
from .sim import (
    flat_side_rollout, plan_rest_to_rest, power_balance, simulate_closed_loop,
    verify_linearization,
)

log = logging.getLogger("flatlin")

EXIT_OK, EXIT_INPUT, EXIT_CONDITION, EXIT_NUMERIC = 0, 2, 3, 4


class ConditionFailure(FlatlinError):
    """A structural condition required by the requested command does not hold."""


class UsageError(FlatlinError):
    """Invalid command-line selection."""


# -- report rendering -----------------------------------------------------------------

def _clean(obj):
    """JSON-safe copy: numpy scalars/arrays to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return x if np.isfinite(x) else repr(x)
    return obj


def render_text(report, indent=0):
    """Human-readable rendering; numbers are printed with ``repr`` so both
    forms carry identical values."""
    pad = "  " * indent
    lines = []
    for key, val in report.items():
        if isinstance(val, dict):
            lines.append(f"{pad}{key}:")
            lines.append(render_text(val, indent + 1))
        elif isinstance(val, list) and val and all(isinstance(v, dict) for v in val):
            lines.append(f"{pad}{key}:")
            for i, item in enumerate(val, start=1):
                lines.append(f"{pad}  [{i}]")
                lines.append(render_text(item, indent + 2))
        else:
            lines.append(f"{pad}{key}: {_fmt(val)}")
    return "\n".join(line for line in lines if line)


def _fmt(val):
    if isinstance(val, list):
        return "[" + ", ".join(_fmt(v) for v in val) + "]"
    if isinstance(val, float):
        return repr(val)
    return str(val)


def _emit(report, args):
    report = _clean(report)
    if args.json:
        print(json.dumps(report, indent=2, sort_keys=False))
    else:
        print(render_text(report))
    return report


# -- output directory ---------------------------------------------------------------------

def _write_outputs(out_dir, project, report, files=()):
    """Write the JSON report, effective config and a sha256 manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = list(files)
    (out / "report.json").write_text(json.dumps(_clean(report), indent=2) + "\n")
    written.append(out / "report.json")
    (out / "effective.cfg").write_text(project.cfg.effective_text())
    written.append(out / "effective.cfg")
    manifest = {
        "tool": f"flatlin {__version__}",
        "config": project.cfg.source,
        "files": [{"path": p.name, "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                   "bytes": p.stat().st_size} for p in written],
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


# -- command bodies ----------------------------------------------------------------------

def _load(args):
    project = Project(args.config)
    solver = project.cfg.solver
    for key in ("dt", "T", "seed", "strategy"):
        val = getattr(args, key, None)
        if val is not None:
            solver[key] = val
    return project


def analyze_report(project):
    fm, gm, gen = project.flat_map, project.gen_map, project.gen
    classical = equilibrium_jacobian(fm, project.y_s)
    lemma = verify_lemma1(classical)
    generalized = equilibrium_jacobian(gm, project.y_s)
    n = gm.n
    return {
        "system": project.cfg.name,
        "p": project.system.p,
        "inputs": project.system.m,
        "flat_outputs": project.m,
        "R": list(fm.R), "S": list(fm.S),
        "generalized": {
            "k": gen.k,
            "state": list(gen.q_names) + list(gen.v_names),
            "inputs": list(gen.u_names),
            "B_tilde": list(gen.B_tilde),
            "R_tilde": list(gm.R), "S_tilde": list(gm.S),
            "Fq_pattern": gm.argument_pattern(gm.Fq),
            "Fv_pattern": gm.argument_pattern(gm.Fv),
            "Fu_pattern": gm.argument_pattern(gm.Fu),
        },
        "lemma1": lemma.to_dict(),
        "equilibrium_jacobian": {
            "y_s": list(project.cfg.equilibrium),
            "rank_dy_Fq_tilde": generalized.rank_y,
            "rank_dy2_Fq_tilde": generalized.rank_y2,
            "dFq_tilde/dy": generalized.dq[0],
            "dFq_tilde/dy[2]": generalized.dq[2],
            "zero_block_max": generalized.zero_block_max,
            "velocity_block_error": generalized.velocity_block_error,
            "rows": list(gm.q_names)[:n],
        },
    }


def kappa_report(project):
    gm = project.gen_map
    s = project.cfg.solver
    candidates = enumerate_kappa(gm, project.y_s)
    rows = []
    for idx, c in enumerate(candidates, start=1):
        reg = check_regularity(gm, c.kappa, project.y_s, n_samples=s["sample_count"],
                               radius=s["sample_radius"], seed=s["seed"])
        row = {"index": idx, **c.to_dict(), "sigma_min_eq": reg.sigma_min_eq,
               "sigma_min_ball": reg.sigma_min_ball}
        rows.append(row)
    return candidates, {"R_tilde": list(gm.R), "n_state": 2 * gm.n, "candidates": rows}


def select_candidate(candidates, selector):
    """Pick by 1-based table index or by an explicit multi-index ``"0,2,4"``."""
    valid = ", ".join(f"{i} = {c.kappa}" for i, c in enumerate(candidates, start=1))
    if selector is None:
        if not candidates:
            raise ConditionFailure("no admissible chain lengths")
        return candidates[0]
    text = str(selector).strip().strip("()")
    try:
        if "," in text:
            want = MultiIndex(int(x) for x in text.split(","))
            for c in candidates:
                if c.kappa == want:
                    return c
        else:
            i = int(text)
            if 1 <= i <= len(candidates):
                return candidates[i - 1]
    except ValueError:
        pass
    raise UsageError(f"no candidate {selector!r}; valid selectors: {valid or 'none'}")


def synthesize_report(project, candidate):
    law = synthesize(project.gen_map, candidate, project.y_s)
    dep = dependence_report(law, seed=project.cfg.solver["seed"])
    q0, v0 = project.gen_map.state(project.y_s)
    u0 = feedback(law, q0, v0, law.equilibrium_w())
    report = {
        "kappa": list(candidate.kappa),
        "case": candidate.case,
        "unknowns": list(law.unknowns),
        "w_slots": list(law.w_input_count),
        "w_slots_state": list(law.w_state_count),
        "equilibrium_input": dict(zip(law.fm.u_names, u0.tolist())),
        "depends_on": [n for n, d in zip(dep.state_names, dep.depends) if d],
        "independent_of": dep.independent_of(),
        "sensitivity": dict(zip(dep.state_names, dep.sensitivity)),
        "input_rows": {n: to_string(e) for n, e in zip(law.fm.u_names, law.input_rows)}
        if sum(len(to_string(e)) for e in law.input_rows) < 4000 else "omitted (large)",
    }
    return law, report


def _scenario(project, args):
    cfg = project.cfg
    names = cfg.equilibria
    start = getattr(args, "start", None) or cfg.scenario.get("from")
    end = getattr(args, "end", None) or cfg.scenario.get("to")
    if start is None or end is None:
        raise UsageError("no scenario: give --from/--to or a [scenario] section")
    for name in (start, end):
        if name not in names:
            raise UsageError(f"unknown equilibrium {name!r}; known: {', '.join(names) or 'none'}")
    return start, end, np.array(names[start]), np.array(names[end])


def simulate_report(project, candidate, out=None, args=None):
    s = project.cfg.solver
    if not s["T"] > 0:
        raise UsageError("simulate needs a transition time T > 0")
    gm, gen = project.gen_map, project.gen
    start, end, y0, y1 = _scenario(project, args if args is not None else _ns())
    law = synthesize(gm, candidate, project.y_s)
    ref = plan_rest_to_rest(gm, y0, y1, s["T"], s["boundary_order"])
    rollout = flat_side_rollout(gm, candidate.kappa, ref, dt=s["dt"])
    traj = simulate_closed_loop(gen, law, ref, dt=s["dt"], strategy=s["strategy"])
    lin = verify_linearization(traj, candidate.kappa, ref)
    target = rollout.state[-1]
    power, _, _ = power_balance(gen, traj)
    report = {
        "kappa": list(candidate.kappa),
        "scenario": {"from": start, "to": end, "T": s["T"], "dt": s["dt"],
                     "strategy": s["strategy"]},
        "linearization": lin.to_dict(),
        "final_state_error": float(np.max(np.abs(traj.state[-1] - target))),
        "max_deviation_from_rollout": float(np.max(np.abs(traj.state - rollout.state))),
        "rollout_dynamics_residual": float(np.max(rollout.diagnostics["dynamics_residual"])),
        "max_psi_residual": float(np.max(traj.diagnostics["psi_residual"])),
        "max_mixed_cond": float(np.max(traj.diagnostics["mixed_cond"])),
        "power_balance_mismatch": power,
    }
    files = []
    if out is not None:
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        files += [traj.write_csv(out / "closed_loop.csv"),
                  traj.write_plot_script(out / "closed_loop.gp", "closed_loop.csv"),
                  rollout.write_csv(out / "rollout.csv"),
                  rollout.write_plot_script(out / "rollout.gp", "rollout.csv")]
    return report, files


def _ns(**kw):
    return argparse.Namespace(**kw)


def plan_report(project, args):
    s = project.cfg.solver
    gm = project.gen_map
    start, end, y0, y1 = _scenario(project, args)
    ref = plan_rest_to_rest(gm, y0, y1, s["T"], s["boundary_order"])
    rollout = flat_side_rollout(gm, None, ref, dt=s["dt"])
    report = {
        "from": start, "to": end, "T": s["T"], "dt": s["dt"],
        "boundary_order": s["boundary_order"],
        "start_state": rollout.state[0], "end_state": rollout.state[-1],
        "max_dynamics_residual": float(np.max(rollout.diagnostics["dynamics_residual"])),
        "samples": len(rollout.t),
    }
    return report, rollout


# -- entry points -------------------------------------------------------------------------

def cmd_analyze(args):
    project = _load(args)
    report = analyze_report(project)
    report = _emit(report, args)
    if args.out:
        _write_outputs(args.out, project, report)
    if not report["lemma1"]["passed"]:
        raise ConditionFailure("equilibrium Jacobian structure checks failed")
    return EXIT_OK


def cmd_kappa(args):
    project = _load(args)
    candidates, report = kappa_report(project)
    report = _emit(report, args)
    if args.out:
        _write_outputs(args.out, project, report)
    if not candidates:
        raise ConditionFailure("no admissible chain lengths regular at the equilibrium")
    return EXIT_OK


def cmd_synthesize(args):
    project = _load(args)
    candidates = enumerate_kappa(project.gen_map, project.y_s)
    candidate = select_candidate(candidates, args.kappa)
    _, report = synthesize_report(project, candidate)
    report = _emit(report, args)
    if args.out:
        _write_outputs(args.out, project, report)
    return EXIT_OK


def cmd_simulate(args):
    project = _load(args)
    candidates = enumerate_kappa(project.gen_map, project.y_s)
    candidate = select_candidate(candidates, args.kappa)
    out = Path(args.out) if args.out else None
    report, files = simulate_report(project, candidate, out, args)
    report = _emit(report, args)
    if out is not None:
        _write_outputs(out, project, report, files)
    return EXIT_OK


def cmd_plan(args):
    project = _load(args)
    report, rollout = plan_report(project, args)
    report = _emit(report, args)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        files = [rollout.write_csv(out / "plan.csv"),
                 rollout.write_plot_script(out / "plan.gp", "plan.csv")]
        _write_outputs(out, project, report, files)
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="flatlin",
        description="Flatness-based quasi-static feedback linearization of Lagrangian systems.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("config", help="config file, or builtin:manipulator|toy|pendulum")
        p.add_argument("--json", action="store_true", help="print the report as JSON")
        p.add_argument("--out", help="directory for report, effective config and manifest")
        return p

    common(sub.add_parser("analyze", help="flat map orders and equilibrium Jacobian checks")
           ).set_defaults(func=cmd_analyze)
    common(sub.add_parser("kappa", help="admissible chain lengths at the equilibrium")
           ).set_defaults(func=cmd_kappa)
    p = common(sub.add_parser("synthesize", help="build a feedback law and report its signature"))
    p.add_argument("--kappa", help="candidate index (1-based) or multi-index like 0,2,4")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synthesize)
    p = common(sub.add_parser("simulate", help="closed-loop rest-to-rest run"))
    p.add_argument("--kappa", help="candidate index (1-based) or multi-index like 0,2,4")
    p.add_argument("--dt", type=float)
    p.add_argument("--T", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--strategy", choices=("A", "B"))
    p.add_argument("--from", dest="start", help="start equilibrium name")
    p.add_argument("--to", dest="end", help="end equilibrium name")
    p.set_defaults(func=cmd_simulate)
    p = common(sub.add_parser("plan", help="rest-to-rest reference through the flat map"))
    p.add_argument("--from", dest="start", help="start equilibrium name")
    p.add_argument("--to", dest="end", help="end equilibrium name")
    p.add_argument("--dt", type=float)
    p.add_argument("--T", type=float)
    p.set_defaults(func=cmd_plan)
    return parser


def exit_code_for(exc):
    if isinstance(exc, (ConfigError, UsageError, NonSymmetricMetricError)):
        return EXIT_INPUT
    if isinstance(exc, (ConditionFailure, ParameterizationError)):
        return EXIT_CONDITION
    if isinstance(exc, (ConvergenceError, SingularJacobianError, BranchSwitchError,
                        SimulationError, EvaluationError)):
        return EXIT_NUMERIC
    if isinstance(exc, (FlatnessError, MechanicsError)):
        return EXIT_CONDITION
    return EXIT_NUMERIC


def main(argv=None):
    level = os.environ.get("FLATLIN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if getattr(args, "T", None) is not None and args.T < 0:
        print("error: --T must be non-negative", file=sys.stderr)
        return EXIT_INPUT
    if getattr(args, "dt", None) is not None and not args.dt > 0:
        print("error: --dt must be positive", file=sys.stderr)
        return EXIT_INPUT
    try:
        return args.func(args)
    except FlatlinError as exc:
        where = ""
        if isinstance(exc, ConfigError) and getattr(exc, "path", None):
            where = f" [{exc.path}]"
        elif isinstance(exc, SimulationError) and getattr(exc, "time", None) is not None:
            where = f" [t={exc.time:.6g}]"
        print(f"error: {exc}{where}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
