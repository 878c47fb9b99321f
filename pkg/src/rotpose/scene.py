"""Synthetic calibrated scenes with pOSE problems and rotation priors.

Measurements are normalised image coordinates (calibration already
applied); a noise level of 1e-3 is roughly one pixel at focal length 1000.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .errors import DegenerateGeometry, DegenerateScene, NoConvergence
from .geometry import rotation_exp
from .objective import ObjectiveConfig, Problem, Variables
from .priors import TwoViewProblem, make_prior, refine_two_view, synthetic_prior

log = logging.getLogger(__name__)

LAYOUTS = ("ring", "sphere-cap")
PRIOR_MODES = ("two-view", "synthetic")
PRIOR_GRAPHS = ("covisibility", "all-pairs")


@dataclass(frozen=True)
class SceneConfig:
    n_cams: int = 10
    n_pts: int = 100
    layout: str = "ring"
    radius: float = 5.0
    point_radius: float = 1.0
    visibility: float = 1.0
    pixel_noise_std: float = 0.0
    prior_mode: str = "two-view"
    angle_noise: float = 0.0
    w_scale: float = 100.0
    prior_graph: str = "covisibility"
    covisibility_min: int = 20
    init_perturbation: float = np.deg2rad(2.0)
    eta: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.n_cams < 2:
            raise ValueError("need at least two cameras")
        if self.n_pts < 8:
            raise ValueError("need at least eight points")
        if self.layout not in LAYOUTS:
            raise ValueError(f"layout must be one of {LAYOUTS}")
        if not 0.0 < self.visibility <= 1.0:
            raise ValueError("visibility must lie in (0, 1]")
        if self.prior_mode not in PRIOR_MODES:
            raise ValueError(f"prior_mode must be one of {PRIOR_MODES}")
        if self.prior_graph not in PRIOR_GRAPHS:
            raise ValueError(f"prior_graph must be one of {PRIOR_GRAPHS}")
        if self.radius <= self.point_radius:
            raise ValueError("cameras must lie outside the point ball")


@dataclass
class GroundTruth:
    rotations: np.ndarray  # (f,3,3)
    translations: np.ndarray  # (f,3)
    points: np.ndarray  # (n,3)
    relative: dict = field(default_factory=dict)  # (k,l) -> R_k R_l^T

    def variables(self):
        return Variables(self.rotations.copy(), self.translations.copy(), self.points.copy())

    def relative_rotation(self, k, l):
        return self.rotations[k] @ self.rotations[l].T


def look_at(center, target=np.zeros(3)):
    """World-to-camera rotation whose optical axis points at ``target``."""
    z = target - center
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 1.0, 0.0])
    if abs(z @ up) > 0.99:
        up = np.array([1.0, 0.0, 0.0])
    x = np.cross(up, z)
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return np.vstack([x, y, z])


def _camera_centers(cfg, rng):
    f = cfg.n_cams
    if cfg.layout == "ring":
        ang = 2 * np.pi * np.arange(f) / f + rng.uniform(-0.1, 0.1, f) * (2 * np.pi / f)
        height = rng.uniform(-0.1, 0.1, f) * cfg.radius
        return np.column_stack([cfg.radius * np.cos(ang), height, cfg.radius * np.sin(ang)])
    # sphere cap around +z within 60 degrees of the pole
    cos_max = np.cos(np.deg2rad(60.0))
    cz = rng.uniform(cos_max, 1.0, f)
    phi = rng.uniform(0, 2 * np.pi, f)
    s = np.sqrt(1 - cz**2)
    return cfg.radius * np.column_stack([s * np.cos(phi), s * np.sin(phi), cz])


def _collinear(centers):
    if len(centers) < 3:
        return False
    x = centers - centers.mean(axis=0)
    sv = np.linalg.svd(x, compute_uv=False)
    return sv[1] <= 1e-9 * max(sv[0], 1e-300)


def _points(cfg, rng):
    d = rng.standard_normal((cfg.n_pts, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    r = cfg.point_radius * rng.uniform(0, 1, cfg.n_pts) ** (1 / 3)
    return d * r[:, None]


def _visibility(cfg, rng):
    f, n = cfg.n_cams, cfg.n_pts
    if cfg.visibility >= 1.0:
        return np.ones((f, n), dtype=bool)
    vis = rng.uniform(size=(f, n)) < cfg.visibility
    for _ in range(100):
        few = vis.sum(axis=0) < 2
        if not few.any():
            break
        vis[:, few] = rng.uniform(size=(f, int(few.sum()))) < cfg.visibility
    # ensure two views per point deterministically if random redraws failed
    for j in np.flatnonzero(vis.sum(axis=0) < 2):
        vis[rng.choice(f, 2, replace=False), j] = True
    for i in np.flatnonzero(vis.sum(axis=1) < 1):
        vis[i, rng.integers(n)] = True
    return vis


def _prior_pairs(cfg, vis):
    covis = vis.astype(np.int64) @ vis.T.astype(np.int64)
    thresh = 5 if cfg.prior_graph == "all-pairs" else cfg.covisibility_min
    pairs = [
        (k, l)
        for k in range(cfg.n_cams)
        for l in range(k + 1, cfg.n_cams)
        if covis[k, l] >= max(thresh, 5)
    ]
    return pairs


def _connected(n, pairs):
    if n == 1:
        return True
    if not pairs:
        return False
    k, l = np.array(pairs).T
    g = csr_matrix((np.ones(len(k)), (k, l)), shape=(n, n))
    ncomp, _ = connected_components(g, directed=False)
    return ncomp == 1


def _two_view_prior(k, l, gt, vis, m, rng, perturb):
    """Refine pair (k, l) with camera l as the reference view."""
    shared = np.flatnonzero(vis[k] & vis[l])
    rk, rl = gt.rotations[k], gt.rotations[l]
    tk, tl = gt.translations[k], gt.translations[l]
    r_rel = rk @ rl.T
    t_rel = tk - r_rel @ tl
    scale = np.linalg.norm(t_rel)
    pts_l = (gt.points[shared] @ rl.T + tl) / scale
    t_unit = t_rel / scale
    # perturbed start inside the basin
    r0 = rotation_exp(rng.normal(0, perturb / np.sqrt(3), 3)) @ r_rel
    t0 = t_unit + rng.normal(0, perturb, 3)
    t0 /= np.linalg.norm(t0)
    u0 = pts_l * (1 + rng.normal(0, perturb, (len(shared), 1)))
    tv = TwoViewProblem(m[l][shared], m[k][shared], (r0, t0, u0))
    lm = refine_two_view(tv)
    return make_prior(k, l, lm)


def generate(cfg):
    """Build a :class:`Problem` and its :class:`GroundTruth` from ``cfg``."""
    rng = np.random.default_rng(cfg.seed)
    centers = _camera_centers(cfg, rng)
    if _collinear(centers):
        raise DegenerateScene("camera centres are collinear")
    rots = np.array([look_at(c) for c in centers])
    trans = -np.einsum("kij,kj->ki", rots, centers)
    pts = _points(cfg, rng)
    gt = GroundTruth(rots, trans, pts)

    for attempt in range(20):
        vis = _visibility(cfg, rng)
        pairs = _prior_pairs(cfg, vis)
        if _connected(cfg.n_cams, pairs):
            break
    else:
        raise DegenerateScene("could not draw a connected prior graph")

    x = np.einsum("kij,nj->kni", rots, pts) + trans[:, None, :]
    if np.any(x[..., 2] <= 0):
        raise DegenerateScene("a point lies behind a camera")
    proj = x[..., :2] / x[..., 2:3]
    noise = rng.normal(0.0, cfg.pixel_noise_std, proj.shape) if cfg.pixel_noise_std > 0 else 0.0
    meas = proj + noise

    cam_idx, pt_idx = np.nonzero(vis)
    obs_m = meas[cam_idx, pt_idx]

    priors = []
    for k, l in pairs:
        gt.relative[(k, l)] = gt.relative_rotation(k, l)
        if cfg.prior_mode == "synthetic":
            priors.append(
                synthetic_prior(gt.relative[(k, l)], cfg.angle_noise, cfg.w_scale, rng, k=k, l=l)
            )
            continue
        try:
            priors.append(_two_view_prior(k, l, gt, vis, meas, rng, cfg.init_perturbation))
        except (NoConvergence, DegenerateGeometry) as exc:
            log.warning("skipping prior (%d, %d): %s", k, l, exc)
    problem = Problem(
        cfg.n_cams, cfg.n_pts, cam_idx, pt_idx, obs_m, priors, ObjectiveConfig(eta=cfg.eta)
    )
    problem.validate()
    return problem, gt
