"""Multi-start basin experiments, near-metric evaluation and upgrade reports."""
from __future__ import annotations

import csv
import io
import itertools
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from .errors import CoincidentCenters, DegenerateMatrix, NotUpgradable, SingularCamera
from .geometry import (
    CameraMatrix,
    align_similarity,
    essentiality_measure,
    fundamental_matrix,
    nearest_rotation,
    rotation_angle,
)
from .objective import Variables, objective_value
from .solver import SolverConfig, init_random, solve, solve_joint_lm
from .upgrade import apply_upgrade, estimate_omega, extract_h

log = logging.getLogger(__name__)

# method -> (objective config overrides, solver)
METHODS = {
    "rot+pose": (dict(include_rot=True, include_diag=False, parametrization="free"), "varpro"),
    "pose": (dict(include_rot=False, include_diag=False, parametrization="free"), "varpro"),
    "diag+pose": (dict(include_rot=False, include_diag=True, parametrization="free"), "joint"),
    "rot+pose-direct": (dict(include_rot=True, include_diag=False, parametrization="exp"), "joint"),
}

BASIN_HEADER = ["method", "seed", "final_objective", "iters", "status", "accepted", "success", "iters_to_min"]
SUMMARY_HEADER = [
    "method", "runs", "success_rate", "f_min", "mean_iters_to_min", "mean_accepted_success",
    "overflow_threshold", "overflow_count",
]
EVAL_HEADER = [
    "l_pose", "ess_mean", "ess_min", "ess_max", "ess_range", "n_pairs", "n_skipped",
    "point_rmse", "rot_err_deg",
]


def method_problem(prob, method):
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; choose from {sorted(METHODS)}")
    return prob.with_config(**METHODS[method][0])


def run_method(prob, method, seed, cfg=None):
    """Solve ``prob`` with ``method`` from the standard-normal start ``seed``."""
    p = method_problem(prob, method)
    cfg = SolverConfig(**{**asdict(cfg or SolverConfig()), "seed": seed})
    init = init_random(p, seed)
    if METHODS[method][1] == "varpro":
        rep = solve(p, cfg, init)
    else:
        rep = solve_joint_lm(p, cfg, init)
    rep.method = method
    return rep


def success(f, f_min, tol, absolute=False):
    if not np.isfinite(f):
        return False
    bound = tol if absolute else tol * (1.0 + abs(f_min))
    return abs(f - f_min) <= bound


# --- basin harness ------------------------------------------------------------

_WORKER = {}


def _init_worker(prob, cfg):
    try:
        from threadpoolctl import threadpool_limits

        threadpool_limits(1)
    except ImportError:  # pragma: no cover
        pass
    _WORKER["prob"] = prob
    _WORKER["cfg"] = cfg


def _run_one(job):
    method, seed = job
    try:
        rep = run_method(_WORKER["prob"], method, seed, _WORKER["cfg"])
        return dict(
            method=method, seed=seed, final_objective=rep.final_objective,
            iters=rep.iters_used, status=rep.status, accepted=rep.accepted,
            trace=rep.objective_trace,
        )
    except Exception as exc:  # noqa: BLE001 - recorded as a failed row
        log.warning("run %s/%d failed: %s", method, seed, exc)
        return dict(
            method=method, seed=seed, final_objective=float("nan"), iters=0,
            status=f"error:{type(exc).__name__}", accepted=0, trace=[],
        )


@dataclass
class BasinResult:
    method: str
    objectives: list  # sorted final objectives
    success_rate: float
    f_min: float
    iters: list
    iters_to_min: list  # successful runs only
    accepted: list  # successful runs only
    overflow_threshold: float = float("nan")
    overflow_count: int = 0


def first_within(trace, f_min, tol, absolute=False):
    """Accepted-step index at which the trace first comes within tolerance."""
    for k, f in enumerate(trace):
        if success(f, f_min, tol, absolute):
            return k
    return -1


def run_basin(prob, methods, runs=100, seed0=0, tol=1e-5, absolute=False,
              cfg=None, workers=None, hist_max=None):
    """Run every method from ``runs`` seeded starts.

    Returns ``(rows, results)``: per-run CSV rows sorted by (method, seed) and
    a :class:`BasinResult` per method.  The success reference is the
    per-method minimum over all runs.
    """
    cfg = cfg or SolverConfig()
    jobs = [(m, s) for m in methods for s in range(seed0, seed0 + runs)]
    for m in methods:
        method_problem(prob, m)
    workers = workers or os.cpu_count() or 1
    if workers <= 1:
        _init_worker(prob, cfg)
        out = [_run_one(j) for j in jobs]
    else:
        with ProcessPoolExecutor(workers, initializer=_init_worker, initargs=(prob, cfg)) as ex:
            out = list(ex.map(_run_one, jobs, chunksize=max(1, len(jobs) // (8 * workers))))
    out.sort(key=lambda r: (r["method"], r["seed"]))

    results = {}
    for m, grp in itertools.groupby(out, key=lambda r: r["method"]):
        grp = list(grp)
        fs = np.array([r["final_objective"] for r in grp])
        f_min = float(np.nanmin(fs)) if np.any(np.isfinite(fs)) else float("nan")
        thresh = hist_max if hist_max is not None else 1.5 * f_min
        its, acc = [], []
        for r in grp:
            r["success"] = success(r["final_objective"], f_min, tol, absolute)
            r["iters_to_min"] = first_within(r["trace"], f_min, tol, absolute) if r["success"] else -1
            if r["success"]:
                its.append(r["iters_to_min"])
                acc.append(r["accepted"])
        results[m] = BasinResult(
            method=m,
            objectives=sorted(fs.tolist()),
            success_rate=sum(r["success"] for r in grp) / len(grp),
            f_min=f_min,
            iters=[r["iters"] for r in grp],
            iters_to_min=its,
            accepted=acc,
            overflow_threshold=float(thresh),
            overflow_count=int(np.sum(~(fs <= thresh))),
        )
    rows = [[r[k] for k in BASIN_HEADER] for r in out]
    return rows, results


def _cell(x):
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


def write_csv(path_or_buf, header, rows):
    close = False
    if isinstance(path_or_buf, (str, os.PathLike)):
        fh = open(path_or_buf, "w", newline="", encoding="ascii")
        close = True
    else:
        fh = path_or_buf
    w = csv.writer(fh, lineterminator="\r\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    if close:
        fh.close()


def summary_rows(results):
    rows = []
    for r in results.values():
        rows.append([
            r.method, len(r.objectives), r.success_rate, r.f_min,
            float(np.mean(r.iters_to_min)) if r.iters_to_min else float("nan"),
            float(np.mean(r.accepted)) if r.accepted else float("nan"),
            r.overflow_threshold, r.overflow_count,
        ])
    return rows


# --- near-metric evaluation ---------------------------------------------------

@dataclass
class MetricReport:
    l_pose: float
    ess_mean: float
    ess_min: float
    ess_max: float
    n_pairs: int
    n_skipped: int
    point_rmse: float = float("nan")
    rot_err_deg: float = float("nan")

    @property
    def ess_range(self):
        return self.ess_max - self.ess_min

    def row(self):
        return [
            self.l_pose, self.ess_mean, self.ess_min, self.ess_max, self.ess_range,
            self.n_pairs, self.n_skipped, self.point_rmse, self.rot_err_deg,
        ]

    def to_csv(self):
        buf = io.StringIO()
        write_csv(buf, EVAL_HEADER, [self.row()])
        return buf.getvalue()


def cameras_of(vars):
    return [CameraMatrix(a, t) for a, t in zip(vars.b, vars.t)]


def evaluation_pairs(prob, all_pairs=False):
    if not all_pairs:
        return sorted({(p.k, p.l) for p in prob.priors if p.k != p.l})
    vis = np.zeros((prob.n_cams, prob.n_pts), dtype=bool)
    vis[prob.obs_cam, prob.obs_pt] = True
    covis = vis.astype(int) @ vis.T.astype(int)
    return [(k, l) for k in range(prob.n_cams) for l in range(k + 1, prob.n_cams) if covis[k, l] > 0]


def essentiality_stats(cams, pairs):
    """``(values, n_skipped)`` of the essentiality measure over ``pairs``."""
    vals, skipped = [], 0
    for k, l in pairs:
        try:
            vals.append(essentiality_measure(fundamental_matrix(cams[k], cams[l])))
        except (SingularCamera, CoincidentCenters, DegenerateMatrix):
            skipped += 1
    return np.array(vals), skipped


def rotation_errors(vars, gt):
    """Similarity-align solution points onto ground truth; returns
    ``(point_rmse, mean camera rotation error in degrees)``.

    Rotation priors only fix the world frame up to O(3), so the alignment
    may include a reflection; camera blocks are sign-normalised before
    projecting onto SO(3).
    """
    sim = align_similarity(vars.c, gt.points, allow_reflection=True)
    aligned = sim.apply(vars.c)
    rmse = float(np.sqrt(np.mean(np.sum((aligned - gt.points) ** 2, axis=1))))
    errs = []
    for a, r_gt in zip(vars.b, gt.rotations):
        a = a @ sim.rot.T
        r_hat = nearest_rotation(np.sign(np.linalg.det(a)) * a)
        errs.append(np.rad2deg(rotation_angle(r_hat @ r_gt.T)))
    return rmse, float(np.mean(errs))


def evaluate(prob, vars, gt=None, all_pairs=False):
    vars.check(prob)
    pose = objective_value(prob, vars).pose
    vals, skipped = essentiality_stats(cameras_of(vars), evaluation_pairs(prob, all_pairs))
    rep = MetricReport(
        l_pose=pose,
        ess_mean=float(vals.mean()) if vals.size else float("nan"),
        ess_min=float(vals.min()) if vals.size else float("nan"),
        ess_max=float(vals.max()) if vals.size else float("nan"),
        n_pairs=int(vals.size),
        n_skipped=skipped,
    )
    if gt is not None:
        rep.point_rmse, rep.rot_err_deg = rotation_errors(vars, gt)
    return rep


# --- upgrade baseline ---------------------------------------------------------

@dataclass
class UpgradeReport:
    residual: float
    realizable: bool
    ess_before: float
    ess_after: float
    defect: float
    vars: Variables | None = None

    def to_csv(self):
        buf = io.StringIO()
        write_csv(
            buf,
            ["residual", "realizable", "ess_mean_before", "ess_mean_after", "orthogonality_defect"],
            [[self.residual, self.realizable, self.ess_before, self.ess_after, self.defect]],
        )
        return buf.getvalue()


def upgrade_solution(vars, pairs=None):
    """Run the stratified upgrade on a solution.

    Raises ``NotUpgradable`` when Omega cannot be factored at all; an
    unrealizable-but-factorable Omega is reported through ``realizable``.
    """
    cams = cameras_of(vars)
    if pairs is None:
        pairs = list(itertools.combinations(range(len(cams)), 2))
    before, _ = essentiality_stats(cams, pairs)
    est = estimate_omega(cams)
    ext = extract_h(est.omega)
    new_cams, new_pts, defect = apply_upgrade(cams, vars.c, ext.h)
    after, _ = essentiality_stats(new_cams, pairs)
    out = Variables(
        np.array([c.a for c in new_cams]), np.array([c.t for c in new_cams]), new_pts
    )
    return UpgradeReport(
        residual=est.residual,
        realizable=ext.realizable,
        ess_before=float(before.mean()) if before.size else float("nan"),
        ess_after=float(after.mean()) if after.size else float("nan"),
        defect=defect,
        vars=out,
    )


__all__ = [
    "METHODS", "BasinResult", "MetricReport", "NotUpgradable", "UpgradeReport",
    "evaluate", "run_basin", "run_method", "upgrade_solution",
]
