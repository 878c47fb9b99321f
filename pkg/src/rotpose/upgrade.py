"""Stratified metric upgrade: fit ``P_i Omega P_i^T ~ I`` and extract H.

This is the classical baseline the joint formulation is compared against.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InsufficientCameras, NotUpgradable
from .geometry import CameraMatrix, ProjectiveTransform, apply_projective

# (row, col) of the 10 free entries of a symmetric 4x4 matrix
_SYM_IDX = [(i, j) for i in range(4) for j in range(i, 4)]


@dataclass
class UpgradeResult:
    omega: np.ndarray
    h: ProjectiveTransform | None = None
    residual: float = float("nan")
    realizable: bool = False
    eigenvalues: np.ndarray | None = None


def _omega_from_params(x):
    om = np.zeros((4, 4))
    for val, (i, j) in zip(x, _SYM_IDX):
        om[i, j] = om[j, i] = val
    return om


def _camera_rows(p):
    """Five linear equations in the 10 entries of Omega for one camera.

    ``M = P Omega P^T``; rows encode M01, M02, M12 = 0 and M00 = M11 = M22.
    """
    coef = np.zeros((3, 3, 10))
    for k, (i, j) in enumerate(_SYM_IDX):
        e = np.zeros((4, 4))
        e[i, j] = e[j, i] = 1.0
        coef[:, :, k] = p @ e @ p.T
    return np.array([
        coef[0, 1], coef[0, 2], coef[1, 2],
        coef[0, 0] - coef[1, 1], coef[0, 0] - coef[2, 2],
    ])


def estimate_omega(cams):
    """Least-squares ``Omega`` (unit Frobenius norm, non-negative trace).

    Each camera is normalised to unit Frobenius norm first so the fit does
    not depend on per-camera scale.  ``residual`` is the smallest singular
    value of the stacked system.
    """
    cams = list(cams)
    if len(cams) < 3:
        raise InsufficientCameras("need at least three cameras")
    rows = []
    for c in cams:
        p = c.matrix if isinstance(c, CameraMatrix) else np.asarray(c, float)
        rows.append(_camera_rows(p / np.linalg.norm(p)))
    a = np.vstack(rows)
    _, s, vt = np.linalg.svd(a)
    om = _omega_from_params(vt[-1])
    om /= np.linalg.norm(om)
    if np.trace(om) < 0:
        om = -om
    return UpgradeResult(omega=om, residual=float(s[-1]))


def extract_h(omega, tol=1e-6):
    """Factor ``Omega ~ H_{1:3} H_{1:3}^T`` and complete H.

    The three eigenvalues of largest magnitude give ``H_{1:3}``; the
    remaining eigenvector (plane at infinity) is the fourth column, scaled so
    ``det(H) = 1``.  A negative eigenvalue among the three, or a remaining one
    below ``-tol * lambda_max``, cannot be realised by a real H: the absolute
    values are used instead and ``realizable`` is False.
    """
    omega = np.asarray(omega, float)
    omega = 0.5 * (omega + omega.T)
    w, e = np.linalg.eigh(omega)
    if w.sum() < 0:
        w, e = -w[::-1], e[:, ::-1]
    order = np.argsort(-np.abs(w))
    w, e = w[order], e[:, order]
    scale = np.abs(w[0])
    if scale <= 0 or np.abs(w[2]) <= tol * scale:
        raise NotUpgradable(f"Omega has rank below three (eigenvalues {w})")
    realizable = bool(np.all(w[:3] > 0) and w[3] >= -tol * scale)
    h = np.empty((4, 4))
    h[:, :3] = e[:, :3] * np.sqrt(np.abs(w[:3]))
    h[:, 3] = e[:, 3]
    d = np.linalg.det(h)
    if abs(d) <= 1e-300:
        raise NotUpgradable("completed H is singular")
    h[:, 3] /= d
    res = UpgradeResult(omega=omega, h=ProjectiveTransform(h), realizable=realizable, eigenvalues=w)
    return res


def orthogonality_defect(a):
    """``|x A A^T - I|_F`` with the best scalar ``x``."""
    m = a @ a.T
    x = np.trace(m) / np.sum(m * m)
    return float(np.linalg.norm(x * m - np.eye(3)))


def apply_upgrade(cams, pts, h):
    """Apply ``H`` to all cameras and points; returns ``(cams, pts, defect)``
    where ``defect`` is the mean orthogonality defect of the new blocks."""
    if not isinstance(h, ProjectiveTransform):
        h = ProjectiveTransform(h)
    pts = np.asarray(pts, float).reshape(-1, 3)
    new_cams = []
    new_pts = pts
    for k, c in enumerate(cams):
        if k == 0:
            nc, new_pts = apply_projective(h, c, pts)
        else:
            nc = CameraMatrix.from_matrix(c.matrix @ h.h)
        new_cams.append(nc)
    defect = float(np.mean([orthogonality_defect(c.a) for c in new_cams]))
    return new_cams, new_pts, defect


def upgrade(cams, pts):
    """estimate_omega -> extract_h -> apply_upgrade in one call."""
    est = estimate_omega(cams)
    ext = extract_h(est.omega)
    ext.residual = est.residual
    new_cams, new_pts, defect = apply_upgrade(cams, pts, ext.h)
    return ext, new_cams, new_pts, defect
