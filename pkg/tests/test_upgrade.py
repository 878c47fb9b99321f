import numpy as np
import pytest

from rotpose.errors import InsufficientCameras, NotUpgradable
from rotpose.geometry import CameraMatrix, essentiality_measure, fundamental_matrix, project
from rotpose.upgrade import apply_upgrade, estimate_omega, extract_h, orthogonality_defect, upgrade

from conftest import random_rotation


def calibrated_scene(rng, f=6, n=20):
    cams = []
    for _ in range(f):
        r = random_rotation(rng)
        cams.append(CameraMatrix(r, rng.normal(size=3) + [0, 0, 6]))
    return cams, rng.normal(size=(n, 3))


def distort(cams, pts, h):
    hinv = np.linalg.inv(h)
    new = [CameraMatrix.from_matrix(c.matrix @ h) for c in cams]
    hom = np.hstack([pts, np.ones((len(pts), 1))]) @ hinv.T
    return new, hom[:, :3] / hom[:, 3:]


def random_h(rng):
    h = np.eye(4) + 0.3 * rng.normal(size=(4, 4))
    h[3] = [0.05, -0.03, 0.02, 1.0]
    return h


def _proportional(a, b):
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    return min(np.linalg.norm(a - b), np.linalg.norm(a + b))


def test_calibrated_cameras_give_canonical_omega(rng):
    cams, _ = calibrated_scene(rng)
    est = estimate_omega(cams)
    assert est.residual <= 1e-10
    assert _proportional(est.omega, np.diag([1.0, 1, 1, 0])) <= 1e-10


def test_distorted_cameras_recover_omega(rng):
    for _ in range(5):
        cams, pts = calibrated_scene(rng)
        h = random_h(rng)
        d_cams, _ = distort(cams, pts, h)
        hinv = np.linalg.inv(h)[:, :3]
        est = estimate_omega(d_cams)
        assert _proportional(est.omega, hinv @ hinv.T) <= 1e-8


def test_noisy_cameras_report_residual(rng):
    cams, _ = calibrated_scene(rng)
    noisy = [CameraMatrix.from_matrix(c.matrix + 1e-3 * rng.normal(size=(3, 4))) for c in cams]
    assert estimate_omega(noisy).residual > 1e-8


def test_omega_invariant_to_camera_scaling(rng):
    cams, pts = calibrated_scene(rng)
    d_cams, _ = distort(cams, pts, random_h(rng))
    scaled = [CameraMatrix.from_matrix(s * c.matrix) for s, c in zip(rng.uniform(0.1, 10, 6), d_cams)]
    assert _proportional(estimate_omega(d_cams).omega, estimate_omega(scaled).omega) <= 1e-10


def test_too_few_cameras(rng):
    cams, _ = calibrated_scene(rng, f=2)
    with pytest.raises(InsufficientCameras):
        estimate_omega(cams)


def test_extract_canonical():
    res = extract_h(np.diag([1.0, 1, 1, 0]))
    h = res.h.h
    assert res.realizable
    assert np.allclose(h[:, :3] @ h[:, :3].T, np.diag([1.0, 1, 1, 0]), atol=1e-12)
    assert np.linalg.det(h) == pytest.approx(1.0)
    assert np.allclose(np.abs(h[:, 3]), [0, 0, 0, 1])


def test_extract_indefinite_is_not_realizable():
    res = extract_h(np.diag([1.0, 1.0, -1.0, 0.0]))
    assert res.realizable is False


def test_extract_negative_fourth_eigenvalue_is_flagged():
    res = extract_h(np.diag([1.0, 1.0, 1.0, -0.1]))
    assert res.realizable is False


def test_extract_rank_deficient():
    with pytest.raises(NotUpgradable):
        extract_h(np.diag([1.0, 1.0, 0.0, 0.0]))


def test_round_trip_restores_metric(rng):
    for _ in range(5):
        cams, pts = calibrated_scene(rng)
        d_cams, d_pts = distort(cams, pts, random_h(rng))
        res, new_cams, new_pts, defect = upgrade(d_cams, d_pts)
        assert res.realizable
        assert defect <= 1e-8
        ess = [essentiality_measure(fundamental_matrix(new_cams[i], new_cams[j]))
               for i in range(6) for j in range(i + 1, 6)]
        assert np.mean(ess) <= 1e-8
        for c_old, c_new in zip(d_cams, new_cams):
            for u, u2 in zip(d_pts, new_pts):
                x, x2 = project(c_old, u), project(c_new, u2)
                assert np.linalg.norm(np.cross(x, x2)) <= 1e-8 * np.linalg.norm(x) * np.linalg.norm(x2)


def test_apply_identity(rng):
    cams, pts = calibrated_scene(rng)
    new_cams, new_pts, defect = apply_upgrade(cams, pts, np.eye(4))
    assert all(np.allclose(a.matrix, b.matrix) for a, b in zip(cams, new_cams))
    assert np.allclose(new_pts, pts)
    assert defect <= 1e-12


def test_noisy_upgrade_leaves_defect(rng):
    cams, pts = calibrated_scene(rng)
    d_cams, d_pts = distort(cams, pts, random_h(rng))
    noisy = [CameraMatrix.from_matrix(c.matrix + 1e-3 * rng.normal(size=(3, 4))) for c in d_cams]
    _, _, _, defect = upgrade(noisy, d_pts)
    assert defect > 0


def test_orthogonality_defect(rng):
    r = random_rotation(rng)
    assert orthogonality_defect(3.0 * r) <= 1e-12
    assert orthogonality_defect(np.diag([1.0, 2.0, 3.0])) > 0.1
