"""Variable-projection and joint Levenberg-Marquardt solvers.

The pOSE residuals are linear in ``v = (points, translations)`` for fixed
camera blocks ``b``, and the rotation terms do not involve ``v`` at all, so
``v`` is eliminated exactly at every iteration and only ``b`` is damped.

All structured linear algebra eliminates the per-point 3x3 blocks first.
The translation system that remains has a 3-dimensional null space (a
common shift of all points absorbed by the translations); it is spanned by
the stacked camera blocks and is removed by adding ``alpha * B B^T``, which
selects the solution with ``B^T t = 0`` without affecting any residual.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import LinearSolveFailure
from .objective import TermBreakdown, Variables, exp_blocks, exp_jacobian_blocks, jacobians, objective_value

log = logging.getLogger(__name__)

STATUSES = ("converged", "max_iters", "stalled")


@dataclass(frozen=True)
class SolverConfig:
    max_iters: int = 200
    lambda0: float = 1e-2
    success_div: float = 1.25
    fail_mul: float = 10.0
    f_tol: float = 1e-12
    f_tol_window: int = 5
    lambda_max: float = 1e16
    seed: int = 0

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")


@dataclass
class SolveReport:
    vars: Variables
    objective_trace: list
    term_breakdown: TermBreakdown
    iters_used: int
    accepted: int
    status: str
    method: str = ""
    lambda_final: float = float("nan")
    flags: dict = field(default_factory=dict)

    @property
    def final_objective(self):
        return self.term_breakdown.total


def init_random(prob, seed):
    """Standard-normal start from ``numpy.random.default_rng(seed)`` (PCG64).

    Draw order: camera parameters (``f x 3 x 3`` blocks, or ``f x 3``
    angle-axis vectors for the exponential map), then translations
    ``f x 3``, then points ``n x 3``.
    """
    rng = np.random.default_rng(seed)
    f, n = prob.n_cams, prob.n_pts
    if prob.config.parametrization == "exp":
        omega = rng.standard_normal((f, 3))
        t = rng.standard_normal((f, 3))
        c = rng.standard_normal((n, 3))
        return Variables.from_omega(omega, t, c)
    b = rng.standard_normal((f, 3, 3))
    t = rng.standard_normal((f, 3))
    c = rng.standard_normal((n, 3))
    return Variables(b, t, c)


# --- structured normal-equation pieces ---------------------------------------

def _block_inverse(n_blocks, tikhonov=1e-10, cond_max=1e12):
    ev = np.linalg.eigvalsh(n_blocks)
    bad = ev[:, 0] * cond_max <= ev[:, 2]
    if np.any(bad):
        n_blocks = n_blocks.copy()
        scale = np.maximum(ev[bad, 2], 1.0)
        n_blocks[bad] += (tikhonov * scale)[:, None, None] * np.eye(3)
    return np.linalg.inv(n_blocks), int(np.count_nonzero(bad))


def _pos_solve(s, rhs, null_basis=None):
    """Solve ``s x = rhs`` for PSD ``s``; ``null_basis`` spans its known kernel."""
    if null_basis is not None:
        nb2 = np.sum(null_basis**2)
        alpha = np.trace(s) / nb2 if nb2 > 0 else 1.0
        s = s + alpha * null_basis @ null_basis.T
    try:
        return sla.cho_solve(sla.cho_factor(s, check_finite=False), rhs, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        return np.linalg.lstsq(s, rhs, rcond=None)[0]


class _Structure:
    """Point-eliminated blocks of ``K^T K`` for fixed camera blocks ``b``."""

    def __init__(self, terms, b):
        tm = terms
        f, n = tm.n_cams, tm.n_pts
        self.terms = tm
        self.b = b
        ku = tm.g @ b[tm.cam]  # (M,3,3) d r_o / d u_j
        self.ku = ku
        nblk = np.zeros((n, 3, 3))
        np.add.at(nblk, tm.pt, np.einsum("mri,mrj->mij", ku, ku))
        self.n_inv, self.rank_deficient = _block_inverse(nblk)
        gtg = np.einsum("mri,mrj->mij", tm.g, tm.g)
        utt = np.zeros((f, 3, 3))
        np.add.at(utt, tm.cam, gtg)
        upt = np.zeros((n, f, 3, 3))
        np.add.at(upt, (tm.pt, tm.cam), np.einsum("mri,mrj->mij", ku, tm.g))
        self.upt = upt.transpose(0, 2, 1, 3).reshape(n, 3, 3 * f)  # (n,3,3f)
        self.e_upt = self.n_inv @ self.upt
        s = sla.block_diag(*utt) if f else np.zeros((0, 0))
        s = s - self.upt.reshape(3 * n, 3 * f).T @ self.e_upt.reshape(3 * n, 3 * f)
        self.s = 0.5 * (s + s.T)
        self.null_basis = b.reshape(3 * f, 3)

    def solve_t(self, rhs):
        return _pos_solve(self.s, rhs, self.null_basis)

    def solve(self, rhs_p, rhs_t):
        """Least-squares solution of ``K^T K v = [rhs_p; rhs_t]``."""
        e_rp = np.einsum("nij,nj->ni", self.n_inv, rhs_p)
        red = rhs_t - np.einsum("nai,na->i", self.upt, e_rp)
        t = self.solve_t(red)
        u = e_rp - np.einsum("nai,i->na", self.e_upt, t)
        return u, t


def solve_linear_cv(prob, b_fixed, return_info=False):
    """Exact minimiser ``(c*, t*)`` of the pOSE terms for fixed camera blocks.

    Points whose normal block has condition number above 1e12 get a 1e-10
    Tikhonov term; their count is reported in ``info["rank_deficient"]``.
    """
    tm = prob.terms
    b = np.asarray(b_fixed, float).reshape(prob.n_cams, 3, 3)
    st = _Structure(tm, b)
    c, t = _inner_from_structure(st)
    if return_info:
        return c, t, {"rank_deficient": st.rank_deficient}
    return c, t


def _inner_from_structure(st):
    tm = st.terms
    # residual = K v - const, so the normal equations read K^T K v = K^T const
    rhs_p = np.zeros((tm.n_pts, 3))
    np.add.at(rhs_p, tm.pt, np.einsum("mri,r->mi", st.ku, tm.const))
    rhs_t = np.zeros((tm.n_cams, 3))
    np.add.at(rhs_t, tm.cam, np.einsum("mri,r->mi", tm.g, tm.const))
    u, t = st.solve(rhs_p, rhs_t.reshape(-1))
    return u, t.reshape(-1, 3)


@dataclass
class _Reduced:
    """``H = J^T P J`` and ``g = J^T P r`` at one linearisation point."""

    h: np.ndarray
    g: np.ndarray
    cost: float


def _reduced_system(prob, b, t, c, st=None):
    tm = prob.terms
    f, n = tm.n_cams, tm.n_pts
    st = st or _Structure(tm, b)
    r_pose = tm.pose_residuals(b, t, c)  # (M,3)
    r_rot = tm.rot_residuals(b)
    cost = float(np.sum(r_pose**2) + np.sum(r_rot**2))

    jo = tm.pose_jac_b(c)  # (M,3,9)
    # J^T J and J^T r
    h = np.zeros((f, 9, f, 9))
    hd = np.zeros((f, 9, 9))
    np.add.at(hd, tm.cam, np.einsum("mri,mrj->mij", jo, jo))
    h[np.arange(f), :, np.arange(f), :] = hd
    g = np.zeros((f, 9))
    np.add.at(g, tm.cam, np.einsum("mri,mr->mi", jo, r_pose))
    if len(tm.pk):
        jk, jl = tm.rot_jac(b)
        np.add.at(h, (tm.pk, slice(None), tm.pk), np.einsum("pri,prj->pij", jk, jk))
        np.add.at(h, (tm.pk, slice(None), tm.pl), np.einsum("pri,prj->pij", jk, jl))
        np.add.at(h, (tm.pl, slice(None), tm.pk), np.einsum("pri,prj->pij", jl, jk))
        np.add.at(h, (tm.pl, slice(None), tm.pl), np.einsum("pri,prj->pij", jl, jl))
        np.add.at(g, tm.pk, np.einsum("pri,pr->pi", jk, r_rot))
        np.add.at(g, tm.pl, np.einsum("pri,pr->pi", jl, r_rot))
    h = h.reshape(9 * f, 9 * f)
    g = g.reshape(-1)

    # K^T J and K^T r
    yp = np.zeros((n, f, 3, 9))
    np.add.at(yp, (tm.pt, tm.cam), np.einsum("mri,mrj->mij", st.ku, jo))
    yp = yp.transpose(0, 2, 1, 3).reshape(n, 3, 9 * f)
    yt_blocks = np.zeros((f, 3, 9))
    np.add.at(yt_blocks, tm.cam, np.einsum("mri,mrj->mij", tm.g, jo))
    yt = np.zeros((f, 3, f, 9))
    yt[np.arange(f), :, np.arange(f), :] = yt_blocks
    yt = yt.reshape(3 * f, 9 * f)
    y_p = np.zeros((n, 3))
    np.add.at(y_p, tm.pt, np.einsum("mri,mr->mi", st.ku, r_pose))
    y_t = np.zeros((f, 3))
    np.add.at(y_t, tm.cam, np.einsum("mri,mr->mi", tm.g, r_pose))
    y_t = y_t.reshape(-1)

    e_yp = st.n_inv @ yp  # (n,3,9f)
    e_y = np.einsum("nij,nj->ni", st.n_inv, y_p)
    upt2 = st.upt.reshape(3 * n, 3 * f)
    rt = yt - upt2.T @ e_yp.reshape(3 * n, 9 * f)
    rt_vec = y_t - upt2.T @ e_y.reshape(-1)
    z = st.solve_t(np.column_stack([rt, rt_vec]))
    zt, zt_vec = z[:, :-1], z[:, -1]
    yp2 = yp.reshape(3 * n, 9 * f)
    h = h - yp2.T @ e_yp.reshape(3 * n, 9 * f) - rt.T @ zt
    g = g - yp2.T @ e_y.reshape(-1) - rt.T @ zt_vec
    return _Reduced(0.5 * (h + h.T), g, cost)


def _damped_solve(h, g, lam):
    a = h + lam * np.eye(len(h))
    try:
        return -sla.cho_solve(sla.cho_factor(a, check_finite=False), g, check_finite=False)
    except (np.linalg.LinAlgError, ValueError):
        try:
            return -np.linalg.solve(a, g)
        except np.linalg.LinAlgError as exc:
            raise LinearSolveFailure(str(exc)) from exc


def _check_free(prob):
    if prob.config.parametrization != "free":
        raise ValueError("variable projection needs the free-matrix parametrization")


def varpro_step(prob, vars, lam, method="schur"):
    """Minimiser of ``|P (J db + r)|^2 + lam |db|^2`` over ``db``.

    ``method="schur"`` uses the point-eliminated normal equations;
    ``method="qr"`` forms an orthonormal basis of range(K) from a pivoted QR
    of the dense K (small problems only).  Returns ``(delta_b, predicted)``
    where ``predicted`` is the model decrease ``|P r|^2 - |P (J db + r)|^2``;
    ``delta_b`` has shape (f, 3, 3).
    """
    _check_free(prob)
    vars.check(prob)
    if method == "schur":
        red = _reduced_system(prob, vars.b, vars.t, vars.c)
        h, g = red.h, red.g
    elif method == "qr":
        h, g = _reduced_dense_qr(prob, vars)
    else:
        raise ValueError(f"unknown step method {method!r}")
    db = _damped_solve(h, g, lam)
    predicted = float(-(2.0 * g @ db + db @ h @ db))
    return db.reshape(-1, 3, 3), predicted


def _reduced_dense_qr(prob, vars, rtol=1e-10):
    J, K = jacobians(prob, vars)
    J = J.toarray()
    K = K.toarray()
    r = prob.terms.residuals(vars.b, vars.t, vars.c)
    q, rr, _ = sla.qr(K, mode="economic", pivoting=True)
    d = np.abs(np.diag(rr))
    rank = int(np.count_nonzero(d > rtol * d[0])) if d.size else 0
    q = q[:, :rank]
    pj = J - q @ (q.T @ J)
    pr = r - q @ (q.T @ r)
    return pj.T @ pj, pj.T @ pr


def reduced_objective(prob, b):
    """``min_v |r(b, v)|^2`` (the variable-projection cost of ``b``)."""
    c, t = solve_linear_cv(prob, b)
    return float(np.sum(prob.terms.residuals(np.asarray(b).reshape(-1, 3, 3), t, c) ** 2))


class _Progress:
    def __init__(self, cfg):
        self.cfg = cfg
        self.small = 0

    def accepted(self, old, new):
        rel = (old - new) / max(abs(old), 1e-300)
        self.small = self.small + 1 if rel < self.cfg.f_tol else 0
        return self.small >= self.cfg.f_tol_window


def solve(prob, cfg=None, init=None):
    """Variable projection (damped Gauss-Newton on ``b`` with exact ``v``).

    Each pass of the loop counts as one iteration whether or not the step is
    accepted.  A rejected step keeps ``(b, v)`` and multiplies the damping
    by ``fail_mul``; the retry reuses the same linearisation.  Stops with
    ``converged`` after ``f_tol_window`` consecutive accepted steps of
    relative decrease below ``f_tol``, or when the damping exceeds
    ``lambda_max`` (no descent left at working precision).
    """
    cfg = cfg or SolverConfig()
    _check_free(prob)
    init = init if init is not None else init_random(prob, cfg.seed)
    init.check(prob)
    tm = prob.terms
    b, t, c = init.b.copy(), init.t.copy(), init.c.copy()
    error = float(np.sum(tm.residuals(b, t, c) ** 2))
    trace = [error]
    lam = cfg.lambda0
    progress = _Progress(cfg)
    status = "max_iters"
    accepted = 0
    it = 0
    red = None
    flags = {"rank_deficient": 0}
    while it < cfg.max_iters:
        if red is None:
            red = _reduced_system(prob, b, t, c)
        it += 1
        try:
            db = _damped_solve(red.h, red.g, lam).reshape(-1, 3, 3)
        except LinearSolveFailure:
            lam *= cfg.fail_mul
            continue
        b_new = b + db
        st = _Structure(tm, b_new)
        c_new, t_new = _inner_from_structure(st)
        err_new = float(np.sum(tm.residuals(b_new, t_new, c_new) ** 2))
        if not np.isfinite(err_new):
            status = "stalled"
            break
        if err_new < error:
            flags["rank_deficient"] = max(flags["rank_deficient"], st.rank_deficient)
            done = progress.accepted(error, err_new)
            b, t, c, error = b_new, t_new, c_new, err_new
            trace.append(error)
            accepted += 1
            lam /= cfg.success_div
            red = None
            if done:
                status = "converged"
                break
        else:
            lam *= cfg.fail_mul
            if lam > cfg.lambda_max:
                status = "converged"
                break
    final = Variables(b, t, c)
    return SolveReport(
        vars=final,
        objective_trace=trace,
        term_breakdown=objective_value(prob, final),
        iters_used=it,
        accepted=accepted,
        status=status,
        method="varpro",
        lambda_final=lam,
        flags=flags,
    )


# --- joint Levenberg-Marquardt -------------------------------------------------

class _JointModel:
    """Full-variable LM with Schur elimination of the points."""

    def __init__(self, prob):
        self.prob = prob
        self.tm = prob.terms
        self.exp_map = prob.config.parametrization == "exp"
        self.w = 3 if self.exp_map else 9
        self.cw = self.w + 3  # camera parameters incl. translation

    def blocks(self, x):
        if self.exp_map:
            return exp_blocks(x["omega"])
        return x["b"]

    def cost(self, x):
        b = self.blocks(x)
        return float(np.sum(self.tm.residuals(b, x["t"], x["c"]) ** 2)), b

    def linearize(self, x, b):
        tm = self.tm
        f, n, w, cw = tm.n_cams, tm.n_pts, self.w, self.cw
        t, c = x["t"], x["c"]
        r_pose = tm.pose_residuals(b, t, c)
        r_rot = tm.rot_residuals(b)
        jo = tm.pose_jac_b(c)
        if self.exp_map:
            d = exp_jacobian_blocks(x["omega"], b)
            jo = jo @ d[tm.cam]
        jcam = np.concatenate([jo, tm.g], axis=2)  # (M,3,cw)
        ku = tm.g @ b[tm.cam]

        hcc = np.zeros((f, cw, f, cw))
        hd = np.zeros((f, cw, cw))
        np.add.at(hd, tm.cam, np.einsum("mri,mrj->mij", jcam, jcam))
        hcc[np.arange(f), :, np.arange(f), :] = hd
        gc = np.zeros((f, cw))
        np.add.at(gc, tm.cam, np.einsum("mri,mr->mi", jcam, r_pose))
        if len(tm.pk):
            jk, jl = tm.rot_jac(b)
            if self.exp_map:
                jk = jk @ d[tm.pk]
                jl = jl @ d[tm.pl]
            hb = hcc[:, :w, :, :w]
            np.add.at(hb, (tm.pk, slice(None), tm.pk), np.einsum("pri,prj->pij", jk, jk))
            np.add.at(hb, (tm.pk, slice(None), tm.pl), np.einsum("pri,prj->pij", jk, jl))
            np.add.at(hb, (tm.pl, slice(None), tm.pk), np.einsum("pri,prj->pij", jl, jk))
            np.add.at(hb, (tm.pl, slice(None), tm.pl), np.einsum("pri,prj->pij", jl, jl))
            hcc[:, :w, :, :w] = hb
            gb = gc[:, :w]
            np.add.at(gb, tm.pk, np.einsum("pri,pr->pi", jk, r_rot))
            np.add.at(gb, tm.pl, np.einsum("pri,pr->pi", jl, r_rot))
            gc[:, :w] = gb
        hpp = np.zeros((n, 3, 3))
        np.add.at(hpp, tm.pt, np.einsum("mri,mrj->mij", ku, ku))
        gp = np.zeros((n, 3))
        np.add.at(gp, tm.pt, np.einsum("mri,mr->mi", ku, r_pose))
        hpc = np.zeros((n, f, 3, cw))
        np.add.at(hpc, (tm.pt, tm.cam), np.einsum("mri,mrj->mij", ku, jcam))
        hpc = hpc.transpose(0, 2, 1, 3).reshape(n, 3, f * cw)
        return hcc.reshape(f * cw, f * cw), gc.reshape(-1), hpp, gp, hpc

    def step(self, lin, lam):
        hcc, gc, hpp, gp, hpc = lin
        n = len(hpp)
        inv = np.linalg.inv(hpp + lam * np.eye(3))
        e_hpc = inv @ hpc
        m = len(hcc)
        hpc2 = hpc.reshape(3 * n, m)
        s = hcc + lam * np.eye(m) - hpc2.T @ e_hpc.reshape(3 * n, m)
        e_gp = np.einsum("nij,nj->ni", inv, gp)
        rhs = gc - hpc2.T @ e_gp.reshape(-1)
        dc = _damped_solve(0.5 * (s + s.T), rhs, 0.0)
        dp = -(e_gp + np.einsum("nij,j->ni", e_hpc, dc))
        return dc, dp

    def apply(self, x, dc, dp):
        f, w, cw = self.tm.n_cams, self.w, self.cw
        dc = dc.reshape(f, cw)
        out = {"t": x["t"] + dc[:, w:], "c": x["c"] + dp}
        if self.exp_map:
            out["omega"] = x["omega"] + dc[:, :w]
        else:
            out["b"] = x["b"] + dc[:, :w].reshape(f, 3, 3)
        return out


def solve_joint_lm(prob, cfg=None, init=None, parametrization=None):
    """Plain LM over all variables jointly (no variable projection).

    ``parametrization`` overrides the problem's: ``"free"`` optimises the
    3x3 blocks directly, ``"exp"`` optimises angle-axis vectors so every
    iterate has exactly orthogonal camera blocks.
    """
    cfg = cfg or SolverConfig()
    if parametrization is not None and parametrization != prob.config.parametrization:
        prob = prob.with_config(parametrization=parametrization)
    model = _JointModel(prob)
    init = init if init is not None else init_random(prob, cfg.seed)
    init.check(prob)
    if model.exp_map:
        if init.omega is None:
            raise ValueError("exponential-map start needs omega")
        x = {"omega": init.omega.copy(), "t": init.t.copy(), "c": init.c.copy()}
    else:
        x = {"b": init.b.copy(), "t": init.t.copy(), "c": init.c.copy()}
    error, b = model.cost(x)
    trace = [error]
    lam = cfg.lambda0
    progress = _Progress(cfg)
    status = "max_iters"
    accepted = 0
    it = 0
    lin = None
    while it < cfg.max_iters:
        if lin is None:
            lin = model.linearize(x, b)
        it += 1
        try:
            dc, dp = model.step(lin, lam)
        except LinearSolveFailure:
            lam *= cfg.fail_mul
            continue
        x_new = model.apply(x, dc, dp)
        err_new, b_new = model.cost(x_new)
        if not np.isfinite(err_new):
            status = "stalled"
            break
        if err_new < error:
            done = progress.accepted(error, err_new)
            x, b, error = x_new, b_new, err_new
            trace.append(error)
            accepted += 1
            lam /= cfg.success_div
            lin = None
            if done:
                status = "converged"
                break
        else:
            lam *= cfg.fail_mul
            if lam > cfg.lambda_max:
                status = "converged"
                break
    final = Variables(b, x["t"], x["c"], x.get("omega"))
    return SolveReport(
        vars=final,
        objective_trace=trace,
        term_breakdown=objective_value(prob, final),
        iters_used=it,
        accepted=accepted,
        status=status,
        method=f"joint-lm-{prob.config.parametrization}",
        lambda_final=lam,
    )
