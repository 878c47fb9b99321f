"""Projective-geometry primitives: cameras, projection, fundamental matrices.

Conventions used throughout the package:

* ``vec`` is column-major (Fortran order) vectorisation of a 3x3 matrix.
* Points are Cartesian 3-vectors; the homogeneous coordinate only shows up
  inside :func:`apply_projective`.
* Homogeneous image vectors are never normalised.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import (
    AngleNearPi,
    CoincidentCenters,
    DegenerateConfiguration,
    DegenerateMatrix,
    PointAtInfinity,
    SingularCamera,
)

ROTATION_TOL = 1e-9


def skew(v):
    """Cross-product matrix ``[v]_x`` so that ``skew(v) @ w == cross(v, w)``."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def vee(m):
    return np.array([m[2, 1], m[0, 2], m[1, 0]])


def vec(m):
    return np.asarray(m).reshape(-1, order="F")


def unvec(v):
    return np.asarray(v).reshape(3, 3, order="F")


def is_rotation(r, tol=ROTATION_TOL):
    r = np.asarray(r, dtype=float)
    if r.shape != (3, 3) or not np.all(np.isfinite(r)):
        return False
    return bool(np.linalg.norm(r @ r.T - np.eye(3)) <= tol and np.linalg.det(r) > 0)


def nearest_rotation(m):
    """Closest rotation in Frobenius norm (sign of ``m`` is ignored)."""
    m = np.asarray(m, dtype=float)
    if np.linalg.det(m) < 0:
        m = -m
    u, _, vt = np.linalg.svd(m)
    d = np.sign(np.linalg.det(u @ vt)) or 1.0
    return u @ np.diag([1.0, 1.0, d]) @ vt


def rotation_angle(r):
    """Geodesic angle of ``r``; atan2 form stays accurate near 0 and pi."""
    r = np.asarray(r, dtype=float)
    s = np.linalg.norm(vee(r - r.T)) / 2.0
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arctan2(s, c))


@dataclass(frozen=True)
class CameraMatrix:
    """A 3x4 camera ``[a | t]``. ``a`` is not required to be orthogonal."""

    a: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        a = np.asarray(self.a, dtype=float).reshape(3, 3)
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(t))):
            raise ValueError("camera entries must be finite")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "t", t)

    @classmethod
    def from_matrix(cls, p):
        p = np.asarray(p, dtype=float)
        return cls(p[:, :3], p[:, 3])

    @property
    def matrix(self):
        return np.hstack([self.a, self.t[:, None]])

    def center(self):
        """Camera centre ``-a^{-1} t``."""
        if abs(np.linalg.det(self.a)) <= 1e-10:
            raise SingularCamera("camera block is not invertible")
        return -np.linalg.solve(self.a, self.t)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rot: np.ndarray
    shift: np.ndarray

    def apply(self, pts):
        pts = np.asarray(pts, dtype=float)
        return self.scale * pts @ self.rot.T + self.shift


@dataclass(frozen=True)
class ProjectiveTransform:
    h: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float).reshape(4, 4)
        if abs(np.linalg.det(h)) <= 1e-12:
            raise ValueError("projective transform must be invertible")
        object.__setattr__(self, "h", h)


def project(p, x):
    """Homogeneous image vector ``a @ u + t``."""
    return p.a @ np.asarray(x, dtype=float) + p.t


def apply_projective(h, p, pts):
    """Map a camera by ``P H`` and points by ``H^{-1} U``.

    Points come back dehomogenised; ``PointAtInfinity`` is raised when a
    transformed point has ``|w| <= 1e-12``.
    """
    if not isinstance(h, ProjectiveTransform):
        h = ProjectiveTransform(h)
    p_new = CameraMatrix.from_matrix(p.matrix @ h.h)
    pts = np.atleast_2d(np.asarray(pts, dtype=float))
    if pts.size == 0:
        return p_new, pts.reshape(0, 3)
    hom = np.hstack([pts, np.ones((len(pts), 1))])
    mapped = np.linalg.solve(h.h, hom.T).T
    w = mapped[:, 3]
    bad = np.flatnonzero(np.abs(w) <= 1e-12)
    if bad.size:
        raise PointAtInfinity(f"point {bad[0]} maps to the plane at infinity")
    return p_new, mapped[:, :3] / w[:, None]


def _normalize_sign(f):
    f = f / np.linalg.norm(f)
    k = np.argmax(np.abs(f))
    if f.flat[k] < 0:
        f = -f
    return f


def fundamental_matrix(p_i, p_j):
    """``F_ij ~ a_j^{-T} [c_i - c_j]_x a_i^{-1}`` so that ``x_j^T F x_i = 0``.

    Normalised to unit Frobenius norm, largest-magnitude entry positive.
    """
    for p in (p_i, p_j):
        if abs(np.linalg.det(p.a)) <= 1e-10:
            raise SingularCamera("camera block is not invertible")
    c_i = p_i.center()
    c_j = p_j.center()
    baseline = c_i - c_j
    if np.linalg.norm(baseline) <= 1e-10:
        raise CoincidentCenters("camera centres coincide")
    ai_inv = np.linalg.inv(p_i.a)
    aj_inv = np.linalg.inv(p_j.a)
    return _normalize_sign(aj_inv.T @ skew(baseline) @ ai_inv)


def essentiality_measure(f):
    """``(s1 - s2) / (s1 + s2)`` of the two largest singular values."""
    s = np.linalg.svd(np.asarray(f, dtype=float), compute_uv=False)
    if s[0] + s[1] <= 1e-12:
        raise DegenerateMatrix("matrix has fewer than two significant singular values")
    return float((s[0] - s[1]) / (s[0] + s[1]))


def rotation_exp(xi):
    """Rodrigues formula for ``exp([xi]_x)``."""
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    k = skew(xi)
    if theta2 < 1e-12:
        # Taylor terms up to theta^4 keep the result orthogonal to ~1e-18.
        a = 1.0 - theta2 / 6.0 + theta2 * theta2 / 120.0
        b = 0.5 - theta2 / 24.0 + theta2 * theta2 / 720.0
    else:
        theta = np.sqrt(theta2)
        a = np.sin(theta) / theta
        b = (1.0 - np.cos(theta)) / theta2
    return np.eye(3) + a * k + b * (k @ k)


def rotation_log(r):
    """Inverse of :func:`rotation_exp` for angles below pi."""
    r = np.asarray(r, dtype=float)
    tr = np.trace(r)
    if tr <= -1.0 + 1e-9:
        raise AngleNearPi("rotation angle too close to pi")
    c = np.clip((tr - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(c)
    w = vee(r - r.T) / 2.0
    if theta < 1e-6:
        return w * (1.0 + theta * theta / 6.0)
    return w * (theta / np.sin(theta))


def left_jacobian(xi):
    """``J_l`` with ``exp([xi + d]_x) ~= exp([J_l(xi) d]_x) exp([xi]_x)``."""
    xi = np.asarray(xi, dtype=float)
    theta2 = float(xi @ xi)
    k = skew(xi)
    if theta2 < 1e-10:
        a = 0.5 - theta2 / 24.0
        b = 1.0 / 6.0 - theta2 / 120.0
    else:
        theta = np.sqrt(theta2)
        a = (1.0 - np.cos(theta)) / theta2
        b = (theta - np.sin(theta)) / (theta2 * theta)
    return np.eye(3) + a * k + b * (k @ k)


def align_similarity(src, dst, allow_reflection=False):
    """Least-squares similarity with ``dst ~= scale * rot @ src + shift``.

    With ``allow_reflection`` the orthogonal part may have determinant -1.
    """
    src = np.asarray(src, dtype=float)
    dst = np.asarray(dst, dtype=float)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise DegenerateConfiguration("need matching (n, 3) point arrays")
    if len(src) < 3:
        raise DegenerateConfiguration("need at least three correspondences")
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    sv = np.linalg.svd(xs, compute_uv=False)
    if sv[0] <= 1e-12 or sv[1] <= 1e-9 * sv[0]:
        raise DegenerateConfiguration("source points are collinear or coincident")
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    e = np.eye(3)
    if not allow_reflection and np.linalg.det(u) * np.linalg.det(vt) < 0:
        e[2, 2] = -1.0
    rot = u @ e @ vt
    var_s = np.sum(xs**2) / len(src)
    scale = float(np.sum(d * np.diag(e)) / var_s)
    if scale <= 0:
        raise DegenerateConfiguration("alignment produced a non-positive scale")
    shift = mu_d - scale * rot @ mu_s
    return SimilarityTransform(scale, rot, shift)
