import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.spatial.transform import Rotation

from rotpose.errors import (
    AngleNearPi, CoincidentCenters, DegenerateConfiguration, DegenerateMatrix, PointAtInfinity,
    SingularCamera,
)
from rotpose.geometry import (
    CameraMatrix, ProjectiveTransform, align_similarity, apply_projective, essentiality_measure,
    fundamental_matrix, is_rotation, left_jacobian, nearest_rotation, project, rotation_angle,
    rotation_exp, rotation_log, skew, vec, unvec, vee,
)

from conftest import random_rotation

vec3 = arrays(np.float64, 3, elements=st.floats(-3, 3, allow_nan=False))


def _random_h(rng):
    while True:
        h = rng.normal(size=(4, 4))
        if abs(np.linalg.det(h)) > 0.1:
            return h


def _calibrated(rng):
    return CameraMatrix(random_rotation(rng), rng.normal(size=3))


# --- small helpers -----------------------------------------------------------

def test_skew_vee_and_cross_product(rng):
    a, b = rng.normal(size=(2, 3))
    assert np.allclose(skew(a) @ b, np.cross(a, b))
    assert np.allclose(vee(skew(a)), a)


def test_vec_is_column_major():
    m = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(vec(m), [0, 3, 6, 1, 4, 7, 2, 5, 8])
    assert np.array_equal(unvec(vec(m)), m)


def test_is_rotation_predicate(rng):
    r = random_rotation(rng)
    assert is_rotation(r)
    assert not is_rotation(-r)  # det -1
    assert not is_rotation(1.01 * r)


def test_nearest_rotation_recovers_scaled_rotation(rng):
    r = random_rotation(rng)
    assert np.allclose(nearest_rotation(3.0 * r), r)
    assert np.allclose(nearest_rotation(-2.0 * r), r)


# --- project -----------------------------------------------------------------

def test_project_identity_camera():
    p = CameraMatrix(np.eye(3), np.zeros(3))
    assert np.array_equal(project(p, [0, 0, 1]), [0, 0, 1])


def test_project_translation_only():
    p = CameraMatrix(np.eye(3), [1, 2, 3])
    assert np.array_equal(project(p, [0, 0, 0]), [1, 2, 3])


def test_project_matches_elementwise_sum(rng):
    for _ in range(20):
        pm = rng.normal(size=(3, 4))
        u = rng.normal(size=3)
        expect = [sum(pm[r, c] * (u[c] if c < 3 else 1.0) for c in range(4)) for r in range(3)]
        assert np.allclose(project(CameraMatrix.from_matrix(pm), u), expect, rtol=1e-14)


def test_camera_rejects_non_finite():
    with pytest.raises(ValueError):
        CameraMatrix(np.full((3, 3), np.nan), np.zeros(3))


def test_center_of_singular_camera():
    with pytest.raises(SingularCamera):
        CameraMatrix(np.zeros((3, 3)), np.ones(3)).center()


# --- apply_projective --------------------------------------------------------

def test_apply_projective_identity(rng):
    p = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
    pts = rng.normal(size=(5, 3))
    p2, pts2 = apply_projective(np.eye(4), p, pts)
    assert np.allclose(p2.matrix, p.matrix)
    assert np.allclose(pts2, pts)


def test_apply_projective_scaled_similarity_keeps_projections_parallel(rng):
    h = np.eye(4)
    h[:3, :3] = 2.0 * random_rotation(rng)
    h[:3, 3] = rng.normal(size=3)
    p = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
    pts = rng.normal(size=(6, 3))
    p2, pts2 = apply_projective(h, p, pts)
    for u, u2 in zip(pts, pts2):
        x, x2 = project(p, u), project(p2, u2)
        assert np.linalg.norm(np.cross(x, x2)) <= 1e-10 * np.linalg.norm(x) * np.linalg.norm(x2)


def test_apply_projective_random_h_parallel_projections(rng):
    for _ in range(20):
        h = _random_h(rng)
        p = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
        pts = rng.normal(size=(8, 3))
        p2, pts2 = apply_projective(h, p, pts)
        for u, u2 in zip(pts, pts2):
            x, x2 = project(p, u), project(p2, u2)
            assert np.linalg.norm(np.cross(x, x2)) <= 1e-8 * np.linalg.norm(x) * np.linalg.norm(x2)


def test_apply_projective_point_at_infinity():
    h = np.eye(4)
    h[3] = [1.0, 0.0, 0.0, 1.0]  # H^{-1} maps x = -1 ... to w = 0
    p = CameraMatrix(np.eye(3), np.zeros(3))
    hinv_row = np.linalg.inv(h)[3]
    # pick a point with hinv_row . (u, 1) = 0
    u = np.array([-hinv_row[3] / hinv_row[0], 0.0, 0.0])
    with pytest.raises(PointAtInfinity):
        apply_projective(h, p, [u])


def test_projective_transform_must_be_invertible():
    with pytest.raises(ValueError):
        ProjectiveTransform(np.zeros((4, 4)))


# --- fundamental matrices ----------------------------------------------------

def test_fundamental_pure_translation_is_cross_matrix():
    f = fundamental_matrix(CameraMatrix(np.eye(3), np.zeros(3)), CameraMatrix(np.eye(3), [1, 0, 0]))
    e = skew([1.0, 0, 0])
    e = e / np.linalg.norm(e)
    assert min(np.linalg.norm(f - e), np.linalg.norm(f + e)) <= 1e-12


def test_fundamental_epipolar_constraint(rng):
    for _ in range(20):
        pi = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
        pj = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
        f = fundamental_matrix(pi, pj)
        for u in rng.normal(size=(10, 3)):
            xi, xj = project(pi, u), project(pj, u)
            assert abs(xj @ f @ xi) <= 1e-9 * np.linalg.norm(xi) * np.linalg.norm(xj)


def test_fundamental_projective_invariance(rng):
    for _ in range(20):
        pi = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
        pj = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
        h = _random_h(rng)
        f1 = fundamental_matrix(pi, pj)
        f2 = fundamental_matrix(CameraMatrix.from_matrix(pi.matrix @ h),
                                CameraMatrix.from_matrix(pj.matrix @ h))
        assert min(np.linalg.norm(f1 - f2), np.linalg.norm(f1 + f2)) <= 1e-6


def test_fundamental_normalisation(rng):
    f = fundamental_matrix(_calibrated(rng), _calibrated(rng))
    assert np.isclose(np.linalg.norm(f), 1.0)
    assert f.flat[np.argmax(np.abs(f))] > 0


def test_fundamental_errors():
    ok = CameraMatrix(np.eye(3), np.zeros(3))
    with pytest.raises(SingularCamera):
        fundamental_matrix(ok, CameraMatrix(np.zeros((3, 3)), np.ones(3)))
    with pytest.raises(CoincidentCenters):
        fundamental_matrix(ok, CameraMatrix(2 * np.eye(3), np.zeros(3)))


# --- essentiality ------------------------------------------------------------

def test_essentiality_calibrated_pair_is_zero(rng):
    for _ in range(20):
        assert essentiality_measure(fundamental_matrix(_calibrated(rng), _calibrated(rng))) <= 1e-8


def test_essentiality_analytic_values():
    assert essentiality_measure(np.diag([2.0, 1.0, 0.0])) == pytest.approx(1 / 3, abs=1e-15)
    assert essentiality_measure(np.diag([1.0, 1e-20, 0.0])) == pytest.approx(1.0)


def test_essentiality_degenerate():
    with pytest.raises(DegenerateMatrix):
        essentiality_measure(np.zeros((3, 3)))


@given(arrays(np.float64, (3, 3), elements=st.floats(-10, 10)))
def test_essentiality_in_unit_interval(f):
    if np.linalg.svd(f, compute_uv=False)[:2].sum() <= 1e-6:
        return
    assert 0.0 <= essentiality_measure(f) <= 1.0


# --- exp / log ---------------------------------------------------------------

def test_rotation_exp_zero_and_quarter_turn():
    assert np.array_equal(rotation_exp(np.zeros(3)), np.eye(3))
    r = rotation_exp([np.pi / 2, 0, 0])
    assert np.allclose(r @ [0, 1, 0], [0, 0, 1], atol=1e-15)


@given(vec3)
def test_rotation_exp_matches_scipy(xi):
    assert np.allclose(rotation_exp(xi), Rotation.from_rotvec(xi).as_matrix(), atol=1e-12)


@given(vec3)
def test_rotation_exp_is_valid_rotation(xi):
    assert is_rotation(rotation_exp(xi))


@given(arrays(np.float64, 3, elements=st.floats(-1.15, 1.15)))
def test_log_exp_round_trip(xi):
    if np.linalg.norm(xi) >= 2.0:
        return
    assert np.linalg.norm(rotation_log(rotation_exp(xi)) - xi) <= 1e-10


def test_rotation_log_near_pi():
    with pytest.raises(AngleNearPi):
        rotation_log(rotation_exp([np.pi, 0, 0]))


def test_rotation_angle(rng):
    xi = rng.normal(size=3)
    xi *= 1.3 / np.linalg.norm(xi)
    assert rotation_angle(rotation_exp(xi)) == pytest.approx(1.3)


def test_left_jacobian_finite_differences(rng):
    for _ in range(10):
        xi = rng.normal(size=3)
        jl = left_jacobian(xi)
        r0 = rotation_exp(xi)
        for k in range(3):
            d = np.zeros(3)
            d[k] = 1e-6
            dr = (rotation_exp(xi + d) - rotation_exp(xi - d)) / 2e-6
            assert np.allclose(dr, skew(jl[:, k]) @ r0, atol=1e-8)


# --- align_similarity --------------------------------------------------------

def test_align_identity(rng):
    x = rng.normal(size=(10, 3))
    s = align_similarity(x, x)
    assert s.scale == pytest.approx(1.0)
    assert np.allclose(s.rot, np.eye(3))
    assert np.allclose(s.shift, 0, atol=1e-12)


def test_align_pure_scale(rng):
    x = rng.normal(size=(10, 3))
    s = align_similarity(x, 2 * x)
    assert s.scale == pytest.approx(2.0)
    assert np.allclose(s.rot, np.eye(3))
    assert np.allclose(s.shift, 0, atol=1e-12)


def test_align_recovers_random_similarity(rng):
    for _ in range(20):
        x = rng.normal(size=(15, 3))
        r, sc, d = random_rotation(rng), rng.uniform(0.2, 5), rng.normal(size=3)
        s = align_similarity(x, sc * x @ r.T + d)
        assert abs(s.scale - sc) <= 1e-8 * sc
        assert np.linalg.norm(s.rot - r) <= 1e-8
        assert np.linalg.norm(s.shift - d) <= 1e-8


def test_align_reflection_only_when_allowed(rng):
    x = rng.normal(size=(15, 3))
    y = x * [1, 1, -1]
    assert np.linalg.det(align_similarity(x, y).rot) > 0
    s = align_similarity(x, y, allow_reflection=True)
    assert np.allclose(s.apply(x), y)


def test_align_degenerate():
    line = np.outer(np.arange(5.0), [1, 2, 3])
    with pytest.raises(DegenerateConfiguration):
        align_similarity(line, line)
    with pytest.raises(DegenerateConfiguration):
        align_similarity(np.zeros((2, 3)), np.zeros((2, 3)))


# --- invariants --------------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_projective_action_preserves_products(seed):
    rng = np.random.default_rng(seed)
    h = _random_h(rng)
    p = CameraMatrix(rng.normal(size=(3, 3)), rng.normal(size=3))
    u = rng.normal(size=(4, 3))
    try:
        p2, u2 = apply_projective(h, p, u)
    except PointAtInfinity:
        return
    for a, b in zip(u, u2):
        x, x2 = project(p, a), project(p2, b)
        assert np.linalg.norm(np.cross(x, x2)) <= 1e-7 * np.linalg.norm(x) * np.linalg.norm(x2)
