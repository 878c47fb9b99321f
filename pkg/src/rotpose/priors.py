"""Relative-rotation estimates and their 9x9 precision roots.

A pair of views is refined with Levenberg-Marquardt on the reprojection
error, with the reference camera fixed to ``[I | 0]`` and the other camera
``[R | t]``, ``|t| = 1``.  The rotation Jacobian ``J`` is taken with respect
to a left perturbation ``exp([xi]_x) R``.  The curvature of the best
achievable error in ``xi``, ``J^T (I - K K^+) J``, is lifted to a penalty on
general 3x3 matrices through an orthonormal basis split into tangent
(skew * R) and normal (symmetric * R) directions.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateGeometry, NoConvergence
from .geometry import rotation_exp, skew, vec
from .objective import RotationPrior

_SQRT2 = np.sqrt(2.0)


@dataclass
class TwoViewProblem:
    """``x_ref`` are measurements in the reference view ``[I|0]``, ``x_other``
    in the view ``[R|t]``.  ``initial`` is ``(R, t, points)``."""

    x_ref: np.ndarray
    x_other: np.ndarray
    initial: tuple

    def __post_init__(self):
        self.x_ref = np.asarray(self.x_ref, float).reshape(-1, 2)
        self.x_other = np.asarray(self.x_other, float).reshape(-1, 2)
        if len(self.x_ref) != len(self.x_other):
            raise ValueError("correspondence arrays differ in length")
        if len(self.x_ref) < 5:
            raise ValueError("need at least five correspondences")
        r, t, pts = self.initial
        t = np.asarray(t, float)
        if abs(np.linalg.norm(t) - 1.0) > 1e-10:
            raise ValueError("initial translation must have unit norm")
        self.initial = (np.asarray(r, float), t, np.asarray(pts, float).reshape(-1, 3))

    @property
    def n_points(self):
        return len(self.x_ref)


@dataclass
class TwoViewLocalMin:
    """Local minimum of a two-view problem.

    ``residual`` stacks ``[pi(u) - x_ref, pi(R u + t) - x_other]`` per point.
    ``jac_rot`` is (4N, 3); ``jac_v`` is (4N, 3 + 3N) with columns ``t``
    followed by the points.
    """

    r_tilde: np.ndarray
    t: np.ndarray
    points: np.ndarray
    residual: np.ndarray
    jac_rot: np.ndarray
    jac_v: np.ndarray
    iterations: int = 0

    @property
    def n_points(self):
        return len(self.points)


def _proj_jac(x):
    """Per-point 2x3 Jacobian of ``x -> x[:2] / x[2]``."""
    z = x[:, 2]
    d = np.zeros((len(x), 2, 3))
    d[:, 0, 0] = 1.0 / z
    d[:, 1, 1] = 1.0 / z
    d[:, 0, 2] = -x[:, 0] / z**2
    d[:, 1, 2] = -x[:, 1] / z**2
    return d


def _tangent_basis(t):
    a = np.eye(3)[np.argmin(np.abs(t))]
    e1 = np.cross(t, a)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(t, e1)
    return np.column_stack([e1, e2])


class _TwoView:
    def __init__(self, tv):
        self.x1 = tv.x_ref
        self.x2 = tv.x_other

    def residual_blocks(self, r, t, u):
        x2 = u @ r.T + t
        r1 = u[:, :2] / u[:, 2:3] - self.x1
        r2 = x2[:, :2] / x2[:, 2:3] - self.x2
        return np.concatenate([r1, r2], axis=1)  # (N,4)

    def jac_blocks(self, r, t, u):
        """Per point: d/dxi (4x3), d/dt (4x3), d/du (4x3)."""
        n = len(u)
        ru = u @ r.T
        x2 = ru + t
        d1 = _proj_jac(u)
        d2 = _proj_jac(x2)
        jx = np.zeros((n, 4, 3))
        jx[:, 2:] = -d2 @ np.array([skew(v) for v in ru])
        jt = np.zeros((n, 4, 3))
        jt[:, 2:] = d2
        ju = np.concatenate([d1, d2 @ r], axis=1)
        return jx, jt, ju


def _lm(tv, r, t, u, fix_rotation=False, max_iters=200, grad_tol=1e-12):
    model = _TwoView(tv)
    lam = 1e-3
    res = model.residual_blocks(r, t, u)
    cost = float(np.sum(res**2))
    it = 0
    for it in range(1, max_iters + 1):
        jx, jt, ju = model.jac_blocks(r, t, u)
        bt = _tangent_basis(t)
        jc = np.concatenate([jx, jt @ bt], axis=2)  # (N,4,5)
        if fix_rotation:
            jc = jc[:, :, 3:]
        nc = jc.shape[2]
        hcc = np.einsum("nri,nrj->ij", jc, jc)
        hcp = np.einsum("nri,nrj->nij", jc, ju)
        hpp = np.einsum("nri,nrj->nij", ju, ju)
        gc = np.einsum("nri,nr->i", jc, res)
        gp = np.einsum("nri,nr->ni", ju, res)
        gnorm = max(np.abs(gc).max(), np.abs(gp).max())
        if gnorm <= grad_tol * (1.0 + np.sqrt(cost)):
            break
        improved = False
        while lam < 1e12:
            hpp_d = hpp + lam * np.eye(3)
            hpp_inv = np.linalg.inv(hpp_d)
            s = hcc + lam * np.eye(nc) - np.einsum("nij,njk,nlk->il", hcp, hpp_inv, hcp)
            rhs = gc - np.einsum("nij,njk,nk->i", hcp, hpp_inv, gp)
            dc = -np.linalg.solve(s, rhs)
            dp = -np.einsum("nij,nj->ni", hpp_inv, gp + np.einsum("nji,j->ni", hcp, dc))
            if fix_rotation:
                r_new = r
                t_new = t + bt @ dc
            else:
                r_new = rotation_exp(dc[:3]) @ r
                t_new = t + bt @ dc[3:]
            t_new = t_new / np.linalg.norm(t_new)
            u_new = u + dp
            res_new = model.residual_blocks(r_new, t_new, u_new)
            cost_new = float(np.sum(res_new**2))
            if np.isfinite(cost_new) and cost_new < cost:
                r, t, u, res, cost = r_new, t_new, u_new, res_new, cost_new
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if not improved:
            break
    return r, t, u, it


def _local_min(tv, r, t, u, iterations):
    model = _TwoView(tv)
    res = model.residual_blocks(r, t, u)
    jx, jt, ju = model.jac_blocks(r, t, u)
    n = len(u)
    jv = np.zeros((n, 4, 3 + 3 * n))
    jv[:, :, :3] = jt
    idx = np.arange(n)
    for k in range(3):
        jv[idx, :, 3 + 3 * idx + k] = ju[:, :, k]
    return TwoViewLocalMin(
        r_tilde=r,
        t=t,
        points=u,
        residual=res.reshape(-1),
        jac_rot=jx.reshape(-1, 3),
        jac_v=jv.reshape(4 * n, -1),
        iterations=iterations,
    )


def refine_two_view(tv, max_iters=200, grad_tol=1e-6):
    """LM on the two-view reprojection error from ``tv.initial``.

    Raises ``NoConvergence`` unless ``|J^T r|, |K^T r| <= grad_tol (1 + |r|)``
    and ``DegenerateGeometry`` if a point ends up behind a camera.
    """
    r, t, u = tv.initial
    r, t, u, it = _lm(tv, r.copy(), t.copy(), u.copy(), max_iters=max_iters)
    lm = _local_min(tv, r, t, u, it)
    rn = np.linalg.norm(lm.residual)
    g1 = np.abs(lm.jac_rot.T @ lm.residual).max()
    g2 = np.abs(lm.jac_v.T @ lm.residual).max()
    if max(g1, g2) > grad_tol * (1.0 + rn):
        raise NoConvergence(f"two-view gradient {max(g1, g2):.3e} after {it} iterations")
    depth1 = u[:, 2]
    depth2 = (u @ r.T + t)[:, 2]
    if np.any(depth1 <= 0) or np.any(depth2 <= 0):
        raise DegenerateGeometry("point behind a camera at the optimum")
    return lm


def reduced_cost(tv, lm, xi):
    """``min_v |r(exp([xi]_x) R, v)|^2`` starting from the local minimum."""
    r = rotation_exp(xi) @ lm.r_tilde
    r, t, u, _ = _lm(tv, r, lm.t.copy(), lm.points.copy(), fix_rotation=True)
    res = _TwoView(tv).residual_blocks(r, t, u)
    return float(np.sum(res**2))


def projected_rotation_information(lm, rcond=1e-10):
    """``J^T (I - K K^+) J`` exploiting the per-point block structure of K.

    Points are eliminated blockwise first; the remaining translation columns
    are handled with an SVD pseudo-inverse (relative cutoff ``rcond``).
    """
    n = lm.n_points
    j = lm.jac_rot.reshape(n, 4, 3)
    kv = lm.jac_v.reshape(n, 4, -1)
    kt = kv[:, :, :3]
    idx = np.arange(n)
    ku = np.stack([kv[idx, :, 3 + 3 * idx + k] for k in range(3)], axis=2)
    nu = np.einsum("nri,nrj->nij", ku, ku)
    nu_inv = np.linalg.inv(nu)

    def proj(x):
        return x - ku @ (nu_inv @ np.einsum("nri,nrj->nij", ku, x))

    jh = proj(j)
    kth = proj(kt)
    info = np.einsum("nri,nrj->ij", jh, jh)
    tt = np.einsum("nri,nrj->ij", kth, kth)
    q = np.einsum("nri,nrj->ij", kth, jh)
    info = info - q.T @ np.linalg.pinv(tt, rcond=rcond, hermitian=True) @ q
    return 0.5 * (info + info.T)


def projected_rotation_information_dense(lm, rcond=1e-10):
    """Same quantity with ``K K^+`` from a dense SVD of K; O(N^3), for checks."""
    k = lm.jac_v
    u, s, _ = np.linalg.svd(k, full_matrices=False)
    u = u[:, s > rcond * s[0]]
    pj = lm.jac_rot - u @ (u.T @ lm.jac_rot)
    return pj.T @ pj


@dataclass(frozen=True)
class LiftedBasis:
    b_mats: np.ndarray  # (9,3,3)
    v: np.ndarray  # (9,9), column i = vec(V_i)


def basis_matrices():
    """The fixed orthonormal basis of 3x3 matrices: three skew, six symmetric."""
    e = np.eye(3)
    mats = [skew(e[i]) / _SQRT2 for i in range(3)]
    mats += [np.outer(e[i], e[i]) for i in range(3)]
    for i, j in ((0, 1), (0, 2), (1, 2)):
        mats.append((np.outer(e[i], e[j]) + np.outer(e[j], e[i])) / _SQRT2)
    return np.array(mats)


def build_lifted_basis(r_tilde, scale=1.0):
    """``V_i = scale * B_i R~``.  Only ``scale = 1`` gives an orthogonal V."""
    b = basis_matrices()
    cols = [vec(scale * bi @ r_tilde) for bi in b]
    return LiftedBasis(b, np.column_stack(cols))


def weight_from_tangent_block(r_tilde, tangent_block, normal_scale=1.0, basis_scale=1.0):
    """``W = V A V^T`` with ``A = diag(tangent_block, normal_scale * I_6)``.

    Returns ``(w, w_sqrt)``.  For an orthogonal V the root is
    ``V sqrt(A) V^T`` with the 3x3 block rooted through ``eigh`` (round-off
    negatives clamped); otherwise ``W`` itself is factored.
    """
    tangent_block = np.asarray(tangent_block, float)
    tangent_block = 0.5 * (tangent_block + tangent_block.T)
    a = np.zeros((9, 9))
    a[:3, :3] = tangent_block
    a[3:, 3:] = normal_scale * np.eye(6)
    v = build_lifted_basis(r_tilde, basis_scale).v
    w = v @ a @ v.T
    w = 0.5 * (w + w.T)
    if np.linalg.norm(v.T @ v - np.eye(9)) <= 1e-10:
        ev, evec = np.linalg.eigh(tangent_block)
        root_a = np.zeros((9, 9))
        root_a[:3, :3] = (evec * np.sqrt(np.clip(ev, 0.0, None))) @ evec.T
        root_a[3:, 3:] = np.sqrt(normal_scale) * np.eye(6)
        w_sqrt = v @ root_a @ v.T
    else:
        ev, evec = np.linalg.eigh(w)
        w_sqrt = (evec * np.sqrt(np.clip(ev, 0.0, None))) @ evec.T
    return w, 0.5 * (w_sqrt + w_sqrt.T)


def build_weight(lm, normal_scale=1.0, basis_scale=1.0):
    info = projected_rotation_information(lm)
    return weight_from_tangent_block(lm.r_tilde, 0.5 * info, normal_scale, basis_scale)


# vec(M^T) = _TRANSPOSE @ vec(M)
_TRANSPOSE = np.eye(9)[[3 * (i % 3) + i // 3 for i in range(9)]]


def make_prior(k, l, lm, normal_scale=1.0):
    """Prior for ``R_k R_l^T ~= lm.r_tilde``.

    The two-view problem must use camera ``l`` as the reference view and
    camera ``k`` as ``[R|t]``.  If ``k > l`` the stored prior is the
    equivalent transposed one on ``(l, k)``.
    """
    if k == l:
        raise ValueError("use RotationPrior.self_pair for k == l")
    _, w_sqrt = build_weight(lm, normal_scale)
    r = lm.r_tilde
    if k > l:
        return RotationPrior(l, k, r.T, _TRANSPOSE @ w_sqrt @ _TRANSPOSE.T)
    return RotationPrior(k, l, r, w_sqrt)


def synthetic_prior(r_rel_gt, angle_noise, w_scale, rng=None, k=0, l=1, normal_scale=1.0):
    """Noisy prior ``exp([eps]_x) r_rel_gt`` with ``eps ~ N(0, angle_noise^2 I)``
    and tangent block ``w_scale * I``."""
    if angle_noise < 0:
        raise ValueError("angle_noise must be non-negative")
    rng = np.random.default_rng(rng)
    eps = rng.normal(0.0, angle_noise, size=3) if angle_noise > 0 else np.zeros(3)
    r = rotation_exp(eps) @ np.asarray(r_rel_gt, float)
    _, w_sqrt = weight_from_tangent_block(r, w_scale * np.eye(3), normal_scale)
    return RotationPrior(k, l, r, w_sqrt)
