"""Residuals and Jacobians of the pOSE objective with relative-rotation terms.

Residual stack (see :func:`assemble_residuals`)::

    for every observation o = (i, j, m), in list order:
        sqrt(1 - eta) * (m * X3 - X12)            2 rows
        sqrt(eta) * ((m.X12 + X3)/(|m|^2+1) - 1)  1 row
    for every active rotation term (k, l), in list order:
        w_sqrt @ vec(A_k A_l^T - R_kl)            9 rows

with ``X = A_i u_j + t_i``.  Every observation row block is ``G_o X - c``
for a fixed 3x3 matrix ``G_o`` and constant ``c = (0, 0, sqrt(eta))``.

Variable layout for Jacobians:

* ``b``: camera blocks, 9 columns per camera, row-major entries of ``A_i``
  (3 columns per camera holding ``omega_i`` for the exponential map).
* ``v``: all points ``u_0, u_1, ...`` (3 each) followed by all
  translations ``t_0, t_1, ...`` (3 each).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import NamedTuple

import numpy as np
import scipy.sparse as sp

from .errors import DimensionMismatch
from .geometry import is_rotation, left_jacobian, rotation_exp, skew, vec

PARAMETRIZATIONS = ("free", "exp")


@dataclass(frozen=True)
class ObjectiveConfig:
    eta: float = 0.05
    include_rot: bool = True
    include_diag: bool = False
    parametrization: str = "free"

    def __post_init__(self):
        if not 0.0 < self.eta < 1.0:
            raise ValueError(f"eta must lie in (0, 1), got {self.eta}")
        if self.include_rot and self.include_diag:
            raise ValueError("include_rot and include_diag are mutually exclusive")
        if self.parametrization not in PARAMETRIZATIONS:
            raise ValueError(f"unknown parametrization {self.parametrization!r}")


class Observation(NamedTuple):
    cam: int
    pt: int
    m: np.ndarray


@dataclass(frozen=True, eq=False)
class RotationPrior:
    """Penalty ``|w_sqrt vec(A_k A_l^T - r_tilde)|^2``."""

    k: int
    l: int
    r_tilde: np.ndarray
    w_sqrt: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.r_tilde, dtype=float).reshape(3, 3)
        w = np.asarray(self.w_sqrt, dtype=float).reshape(9, 9)
        object.__setattr__(self, "r_tilde", r)
        object.__setattr__(self, "w_sqrt", w)
        if self.k > self.l:
            raise ValueError("prior indices must satisfy k <= l")

    @classmethod
    def self_pair(cls, k):
        return cls(k, k, np.eye(3), np.eye(9))

    def check(self, tol=1e-10):
        """Validate the PSD / rotation invariants; returns self."""
        if not is_rotation(self.r_tilde):
            raise ValueError("r_tilde is not a rotation")
        if np.abs(self.w_sqrt - self.w_sqrt.T).max() > tol * max(1.0, np.abs(self.w_sqrt).max()):
            raise ValueError("w_sqrt is not symmetric")
        if np.linalg.eigvalsh(self.w_sqrt).min() < -tol * max(1.0, np.abs(self.w_sqrt).max()):
            raise ValueError("w_sqrt is not positive semi-definite")
        return self


@dataclass(eq=False)
class Problem:
    n_cams: int
    n_pts: int
    obs_cam: np.ndarray
    obs_pt: np.ndarray
    obs_m: np.ndarray
    priors: list = field(default_factory=list)
    config: ObjectiveConfig = field(default_factory=ObjectiveConfig)

    def __post_init__(self):
        self.obs_cam = np.asarray(self.obs_cam, dtype=np.int64).reshape(-1)
        self.obs_pt = np.asarray(self.obs_pt, dtype=np.int64).reshape(-1)
        self.obs_m = np.asarray(self.obs_m, dtype=float).reshape(-1, 2)
        if not (len(self.obs_cam) == len(self.obs_pt) == len(self.obs_m)):
            raise DimensionMismatch("observation arrays differ in length")
        self.priors = list(self.priors)

    @classmethod
    def from_observations(cls, n_cams, n_pts, observations, priors=(), config=None):
        obs = list(observations)
        return cls(
            n_cams,
            n_pts,
            [o.cam for o in obs],
            [o.pt for o in obs],
            np.array([o.m for o in obs], dtype=float).reshape(-1, 2),
            list(priors),
            config or ObjectiveConfig(),
        )

    @property
    def n_obs(self):
        return len(self.obs_cam)

    def observations(self):
        for i, j, m in zip(self.obs_cam, self.obs_pt, self.obs_m):
            yield Observation(int(i), int(j), m.copy())

    def with_config(self, **changes):
        return Problem(
            self.n_cams, self.n_pts, self.obs_cam, self.obs_pt, self.obs_m,
            self.priors, replace(self.config, **changes),
        )

    def validate(self):
        if self.n_obs and (self.obs_cam.min() < 0 or self.obs_cam.max() >= self.n_cams):
            raise DimensionMismatch("observation camera index out of range")
        if self.n_obs and (self.obs_pt.min() < 0 or self.obs_pt.max() >= self.n_pts):
            raise DimensionMismatch("observation point index out of range")
        if not np.all(np.isfinite(self.obs_m)):
            raise ValueError("non-finite measurement")
        per_cam = np.bincount(self.obs_cam, minlength=self.n_cams)
        if np.any(per_cam < 1):
            raise ValueError(f"camera {int(np.argmin(per_cam))} has no observations")
        per_pt = np.bincount(self.obs_pt, minlength=self.n_pts)
        if np.any(per_pt < 2):
            raise ValueError(f"point {int(np.argmin(per_pt))} is seen by fewer than two cameras")
        for p in self.priors:
            if not (0 <= p.k <= p.l < self.n_cams):
                raise DimensionMismatch(f"prior ({p.k}, {p.l}) out of range")
        return self

    def active_priors(self):
        """Rotation terms entering the objective under the current config.

        With ``include_rot`` this is the stored prior list plus an identity
        self-term for every camera lacking one; with ``include_diag`` only
        the self-terms.
        """
        cfg = self.config
        if cfg.include_diag:
            return [RotationPrior.self_pair(k) for k in range(self.n_cams)]
        if not cfg.include_rot:
            return []
        have = {p.k for p in self.priors if p.k == p.l}
        extra = [RotationPrior.self_pair(k) for k in range(self.n_cams) if k not in have]
        return list(self.priors) + extra

    @cached_property
    def terms(self):
        return _Terms(self)


@dataclass
class Variables:
    """Stacked unknowns: camera blocks ``b`` (f,3,3), translations ``t``
    (f,3), points ``c`` (n,3).  ``omega`` (f,3) is set only for the
    exponential-map parametrization, in which case ``b`` equals
    ``exp([omega]_x)`` blockwise."""

    b: np.ndarray
    t: np.ndarray
    c: np.ndarray
    omega: np.ndarray | None = None

    def copy(self):
        return Variables(
            self.b.copy(), self.t.copy(), self.c.copy(),
            None if self.omega is None else self.omega.copy(),
        )

    @classmethod
    def from_omega(cls, omega, t, c):
        omega = np.asarray(omega, dtype=float)
        return cls(exp_blocks(omega), np.asarray(t, float), np.asarray(c, float), omega)

    @property
    def v(self):
        return np.concatenate([self.c.reshape(-1), self.t.reshape(-1)])

    def check(self, prob):
        f, n = prob.n_cams, prob.n_pts
        if self.b.shape != (f, 3, 3) or self.t.shape != (f, 3) or self.c.shape != (n, 3):
            raise DimensionMismatch(
                f"variables {self.b.shape}, {self.t.shape}, {self.c.shape} "
                f"do not match problem with {f} cameras, {n} points"
            )
        return self


def exp_blocks(omega):
    return np.array([rotation_exp(w) for w in np.asarray(omega).reshape(-1, 3)]).reshape(-1, 3, 3)


# --- single-term residuals --------------------------------------------------

def residual_ose(p, u, m):
    x = p.a @ np.asarray(u, float) + p.t
    m = np.asarray(m, float)
    return m * x[2] - x[:2]


def residual_aff(p, u, m):
    x = p.a @ np.asarray(u, float) + p.t
    m = np.asarray(m, float)
    return float((m @ x[:2] + x[2]) / (m @ m + 1.0) - 1.0)


def residual_rot(r_k, r_l, prior):
    return prior.w_sqrt @ vec(np.asarray(r_k) @ np.asarray(r_l).T - prior.r_tilde)


def residual_diag(r_k):
    r_k = np.asarray(r_k, float)
    return vec(r_k @ r_k.T - np.eye(3))


# --- vectorised assembly ------------------------------------------------------

def observation_weights(m, eta):
    """Per-observation 3x3 maps ``G_o`` with residual ``G_o X - (0,0,sqrt(eta))``."""
    m = np.asarray(m, float).reshape(-1, 2)
    g = np.zeros((len(m), 3, 3))
    so = np.sqrt(1.0 - eta)
    sa = np.sqrt(eta)
    g[:, 0, 0] = -so
    g[:, 0, 2] = so * m[:, 0]
    g[:, 1, 1] = -so
    g[:, 1, 2] = so * m[:, 1]
    den = (m * m).sum(axis=1) + 1.0
    g[:, 2, 0] = sa * m[:, 0] / den
    g[:, 2, 1] = sa * m[:, 1] / den
    g[:, 2, 2] = sa / den
    return g


class _Terms:
    """Precomputed, variable-independent arrays for one problem."""

    def __init__(self, prob):
        cfg = prob.config
        self.n_cams = prob.n_cams
        self.n_pts = prob.n_pts
        self.cam = prob.obs_cam
        self.pt = prob.obs_pt
        self.g = observation_weights(prob.obs_m, cfg.eta)
        self.const = np.array([0.0, 0.0, np.sqrt(cfg.eta)])
        pri = prob.active_priors()
        self.pk = np.array([p.k for p in pri], dtype=np.int64)
        self.pl = np.array([p.l for p in pri], dtype=np.int64)
        self.r_tilde = np.array([p.r_tilde for p in pri]).reshape(-1, 3, 3)
        self.w_sqrt = np.array([p.w_sqrt for p in pri]).reshape(-1, 9, 9)
        # row-major flattening of the transpose == column-major vec
        self.r_tilde_vec = np.transpose(self.r_tilde, (0, 2, 1)).reshape(-1, 9)
        self.n_pose_rows = 3 * len(self.cam)
        self.n_rot_rows = 9 * len(pri)

    def pose_residuals(self, b, t, c):
        x = np.einsum("mij,mj->mi", b[self.cam], c[self.pt]) + t[self.cam]
        return np.einsum("mij,mj->mi", self.g, x) - self.const

    def rot_residuals(self, b):
        if not len(self.pk):
            return np.zeros((0, 9))
        prod = np.einsum("pis,pjs->pji", b[self.pk], b[self.pl]).reshape(-1, 9)
        return np.einsum("pij,pj->pi", self.w_sqrt, prod - self.r_tilde_vec)

    def residuals(self, b, t, c):
        return np.concatenate([self.pose_residuals(b, t, c).ravel(), self.rot_residuals(b).ravel()])

    def pose_jac_b(self, c):
        """d r_o / d a_i, shape (M, 3, 9): ``kron(G_o, u_j^T)``."""
        u = c[self.pt]
        return (self.g[:, :, :, None] * u[:, None, None, :]).reshape(-1, 3, 9)

    def rot_jac(self, b):
        """d r_p / d a_k and d r_p / d a_l, each (P, 9, 9)."""
        eye = np.eye(3)
        dk = np.einsum("pP,nqs->nqpPs", eye, b[self.pl]).reshape(-1, 9, 9)
        dl = np.einsum("qQ,nps->nqpQs", eye, b[self.pk]).reshape(-1, 9, 9)
        return self.w_sqrt @ dk, self.w_sqrt @ dl


def assemble_residuals(prob, vars):
    vars.check(prob)
    return prob.terms.residuals(vars.b, vars.t, vars.c)


def exp_jacobian_blocks(omega, b):
    """d vec_rowmajor(exp([w]_x)) / d w per camera, shape (f, 9, 3)."""
    out = np.empty((len(omega), 9, 3))
    for k, (w, a) in enumerate(zip(omega, b)):
        jl = left_jacobian(w)
        for p in range(3):
            out[k, :, p] = (skew(jl[:, p]) @ a).reshape(-1)
    return out


def jacobians(prob, vars):
    """Sparse ``(J, K)`` of the residual stack.

    ``J`` has 9 columns per camera (row-major block entries) or 3 per camera
    under the exponential map; ``K`` has the point-then-translation layout
    from the module docstring.  Rotation rows of ``K`` are empty.
    """
    vars.check(prob)
    tm = prob.terms
    f, n, M = prob.n_cams, prob.n_pts, len(tm.cam)
    nrows = tm.n_pose_rows + tm.n_rot_rows
    rows_o = 3 * np.arange(M)[:, None] + np.arange(3)[None, :]  # (M,3)

    jb_pose = tm.pose_jac_b(vars.c)  # (M,3,9)
    jk, jl = tm.rot_jac(vars.b)
    P = len(tm.pk)
    rows_p = tm.n_pose_rows + 9 * np.arange(P)[:, None] + np.arange(9)[None, :]

    exp_map = prob.config.parametrization == "exp"
    if exp_map:
        if vars.omega is None:
            raise DimensionMismatch("exponential-map problem needs omega")
        d = exp_jacobian_blocks(vars.omega, vars.b)  # (f,9,3)
        jb_pose = jb_pose @ d[tm.cam]
        jk = jk @ d[tm.pk]
        jl = jl @ d[tm.pl]
    w = 3 if exp_map else 9
    cols_cam = lambda idx: w * idx[:, None] + np.arange(w)[None, :]  # noqa: E731

    ri = np.concatenate([
        np.repeat(rows_o, w, axis=1).ravel(),
        np.repeat(rows_p, w, axis=1).ravel(),
        np.repeat(rows_p, w, axis=1).ravel(),
    ])
    ci = np.concatenate([
        np.tile(cols_cam(tm.cam), (1, 3)).ravel(),
        np.tile(cols_cam(tm.pk), (1, 9)).ravel(),
        np.tile(cols_cam(tm.pl), (1, 9)).ravel(),
    ])
    vals = np.concatenate([jb_pose.ravel(), jk.ravel(), jl.ravel()])
    J = sp.coo_matrix((vals, (ri, ci)), shape=(nrows, w * f)).tocsr()

    ku = tm.g @ vars.b[tm.cam]  # (M,3,3)
    ri = np.concatenate([np.repeat(rows_o, 3, axis=1).ravel()] * 2)
    ci = np.concatenate([
        np.tile(3 * tm.pt[:, None] + np.arange(3), (1, 3)).ravel(),
        np.tile(3 * n + 3 * tm.cam[:, None] + np.arange(3), (1, 3)).ravel(),
    ])
    vals = np.concatenate([ku.ravel(), tm.g.ravel()])
    K = sp.coo_matrix((vals, (ri, ci)), shape=(nrows, 3 * n + 3 * f)).tocsr()
    return J, K


@dataclass(frozen=True)
class TermBreakdown:
    """Unweighted term sums plus ``pose = (1-eta) ose + eta aff`` and ``total``."""

    ose: float
    aff: float
    rot: float
    diag: float
    pose: float
    total: float

    def as_dict(self):
        return {k: getattr(self, k) for k in ("ose", "aff", "rot", "diag", "pose", "total")}


def objective_value(prob, vars):
    vars.check(prob)
    tm = prob.terms
    eta = prob.config.eta
    r = tm.pose_residuals(vars.b, vars.t, vars.c)
    ose = float(np.sum(r[:, :2] ** 2) / (1.0 - eta))
    aff = float(np.sum(r[:, 2] ** 2) / eta)
    rr = float(np.sum(tm.rot_residuals(vars.b) ** 2))
    rot = rr if prob.config.include_rot else 0.0
    diag = rr if prob.config.include_diag else 0.0
    pose = (1.0 - eta) * ose + eta * aff
    return TermBreakdown(ose, aff, rot, diag, pose, pose + rot + diag)
