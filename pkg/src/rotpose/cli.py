"""Command-line driver: generate, solve, basin, eval, upgrade.

Exit codes: 0 ok, 2 usage error, 3 solver did not converge, 4 not upgradable.
"""
from __future__ import annotations

import argparse
import logging
import sys

import numpy as np

from . import io as rio
from .errors import NotUpgradable, ParseError
from .experiments import (
    BASIN_HEADER,
    EVAL_HEADER,
    METHODS,
    SUMMARY_HEADER,
    evaluate,
    evaluation_pairs,
    run_basin,
    run_method,
    summary_rows,
    upgrade_solution,
    write_csv,
)
from .scene import LAYOUTS, PRIOR_GRAPHS, PRIOR_MODES, GroundTruth, SceneConfig, generate
from .solver import SolverConfig

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_NOT_UPGRADABLE = 0, 2, 3, 4

SOLVE_REPORT_HEADER = [
    "method", "eta", "seed", "status", "iters", "accepted",
    "total", "ose", "aff", "rot", "diag", "pose",
]


def _solver_args(p):
    p.add_argument("--max-iters", type=int, default=200)
    p.add_argument("--lambda0", type=float, default=1e-2)
    p.add_argument("--f-tol", type=float, default=1e-12)
    p.add_argument("--eta", type=float, default=None, help="override the problem's eta")


def _solver_config(args, seed=0):
    return SolverConfig(max_iters=args.max_iters, lambda0=args.lambda0, f_tol=args.f_tol, seed=seed)


def _load_problem(args):
    prob = rio.load_problem(args.problem)
    if getattr(args, "eta", None) is not None:
        prob = prob.with_config(eta=args.eta)
    return prob


def build_parser():
    ap = argparse.ArgumentParser(prog="rotpose", description=__doc__.splitlines()[0])
    ap.add_argument("--log-level", default="WARNING")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="synthesise a scene and write a problem file")
    g.add_argument("--cams", type=int, required=True)
    g.add_argument("--pts", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--layout", choices=LAYOUTS, default="ring")
    g.add_argument("--radius", type=float, default=5.0)
    g.add_argument("--point-radius", type=float, default=1.0)
    g.add_argument("--visibility", type=float, default=1.0)
    g.add_argument("--noise", type=float, default=0.0, help="std of measurement noise (normalised units)")
    g.add_argument("--prior-mode", choices=PRIOR_MODES, default="two-view")
    g.add_argument("--angle-noise", type=float, default=0.0)
    g.add_argument("--w-scale", type=float, default=100.0)
    g.add_argument("--prior-graph", choices=PRIOR_GRAPHS, default="covisibility")
    g.add_argument("--covis-min", type=int, default=20)
    g.add_argument("--eta", type=float, default=0.05)
    g.add_argument("-o", "--output", required=True)
    g.add_argument("--gt-output", help="write ground truth in solution format")

    s = sub.add_parser("solve", help="solve a problem from a seeded random start")
    s.add_argument("--problem", required=True)
    s.add_argument("--method", choices=sorted(METHODS), default="rot+pose")
    s.add_argument("--seed", type=int, default=0)
    _solver_args(s)
    s.add_argument("-o", "--output", required=True, help="solution file")
    s.add_argument("--report", help="report CSV (default: stdout)")
    s.add_argument("--ply", help="also export a PLY point cloud")

    b = sub.add_parser("basin", help="multi-start success-rate experiment")
    b.add_argument("--problem", required=True)
    b.add_argument("--runs", type=int, default=100)
    b.add_argument("--tol", type=float, default=1e-5)
    b.add_argument("--absolute", action="store_true", help="absolute instead of relative tolerance")
    b.add_argument("--methods", default="rot+pose,pose,diag+pose,rot+pose-direct")
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--workers", type=int, default=None)
    b.add_argument("--hist-max", type=float, default=None, help="overflow-bin threshold")
    _solver_args(b)
    b.add_argument("-o", "--output", required=True, help="per-run CSV")
    b.add_argument("--summary", help="per-method summary CSV (default: stdout)")

    e = sub.add_parser("eval", help="near-metric report for a solution")
    e.add_argument("--problem", required=True)
    e.add_argument("--solution", required=True)
    e.add_argument("--gt", help="ground truth in solution format")
    e.add_argument("--all-pairs", action="store_true")
    e.add_argument("--eta", type=float, default=None)
    e.add_argument("-o", "--output", help="CSV (default: stdout)")

    u = sub.add_parser("upgrade", help="stratified metric upgrade baseline")
    u.add_argument("--solution", required=True)
    u.add_argument("--problem", help="restrict essentiality statistics to prior pairs")
    u.add_argument("-o", "--output", help="upgraded solution file")
    u.add_argument("--report", help="report CSV (default: stdout)")
    return ap


def cmd_generate(args):
    cfg = SceneConfig(
        n_cams=args.cams, n_pts=args.pts, layout=args.layout, radius=args.radius,
        point_radius=args.point_radius, visibility=args.visibility,
        pixel_noise_std=args.noise, prior_mode=args.prior_mode, angle_noise=args.angle_noise,
        w_scale=args.w_scale, prior_graph=args.prior_graph, covisibility_min=args.covis_min,
        eta=args.eta, seed=args.seed,
    )
    prob, gt = generate(cfg)
    rio.save_problem(prob, args.output)
    if args.gt_output:
        rio.save_solution(gt.variables(), args.gt_output)
    print(
        f"wrote {args.output}: {prob.n_cams} cameras, {prob.n_pts} points, "
        f"{prob.n_obs} observations, {len(prob.priors)} priors"
    )
    return EXIT_OK


def _emit(text, path):
    if path:
        with open(path, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _csv_text(header, rows):
    import io

    buf = io.StringIO()
    write_csv(buf, header, rows)
    return buf.getvalue()


def cmd_solve(args):
    prob = _load_problem(args)
    rep = run_method(prob, args.method, args.seed, _solver_config(args, args.seed))
    rio.save_solution(rep.vars, args.output)
    if args.ply:
        rio.export_ply(rep.vars, args.ply)
    tb = rep.term_breakdown
    row = [
        args.method, prob.config.eta, args.seed, rep.status, rep.iters_used, rep.accepted,
        tb.total, tb.ose, tb.aff, tb.rot, tb.diag, tb.pose,
    ]
    _emit(_csv_text(SOLVE_REPORT_HEADER, [row]), args.report)
    return EXIT_OK if rep.status == "converged" else EXIT_NOT_CONVERGED


def cmd_basin(args):
    prob = _load_problem(args)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    for m in methods:
        if m not in METHODS:
            raise _Usage(f"unknown method {m!r}; choose from {sorted(METHODS)}")
    rows, results = run_basin(
        prob, methods, runs=args.runs, seed0=args.seed, tol=args.tol, absolute=args.absolute,
        cfg=_solver_config(args), workers=args.workers, hist_max=args.hist_max,
    )
    write_csv(args.output, BASIN_HEADER, rows)
    _emit(_csv_text(SUMMARY_HEADER, summary_rows(results)), args.summary)
    return EXIT_OK


def _load_gt(path):
    v = rio.load_solution(path)
    return GroundTruth(v.b, v.t, v.c)


def cmd_eval(args):
    prob = _load_problem(args)
    vars = rio.load_solution(args.solution)
    gt = _load_gt(args.gt) if args.gt else None
    rep = evaluate(prob, vars, gt, all_pairs=args.all_pairs)
    _emit(_csv_text(EVAL_HEADER, [rep.row()]), args.output)
    return EXIT_OK


def cmd_upgrade(args):
    vars = rio.load_solution(args.solution)
    pairs = evaluation_pairs(rio.load_problem(args.problem)) if args.problem else None
    try:
        rep = upgrade_solution(vars, pairs)
    except NotUpgradable as exc:
        print(f"not upgradable: {exc}", file=sys.stderr)
        _emit(_csv_text(
            ["residual", "realizable", "ess_mean_before", "ess_mean_after", "orthogonality_defect"],
            [[float("nan"), False, float("nan"), float("nan"), float("nan")]],
        ), args.report)
        return EXIT_NOT_UPGRADABLE
    if args.output:
        rio.save_solution(rep.vars, args.output)
    _emit(rep.to_csv(), args.report)
    return EXIT_OK if rep.realizable else EXIT_NOT_UPGRADABLE


class _Usage(Exception):
    pass


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "basin": cmd_basin,
    "eval": cmd_eval,
    "upgrade": cmd_upgrade,
}


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        return COMMANDS[args.command](args)
    except (_Usage, ValueError) as exc:
        print(f"rotpose {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ParseError, OSError) as exc:
        print(f"rotpose {args.command}: error: {exc}", file=sys.stderr)
        return 1


def entry():  # pragma: no cover
    np.seterr(all="ignore")
    sys.exit(main())


if __name__ == "__main__":  # pragma: no cover
    entry()
