import numpy as np
import pytest

from rotpose import io as rio
from rotpose.geometry import is_rotation, rotation_angle
from rotpose.objective import objective_value
from rotpose.scene import SceneConfig, _connected, generate, look_at


def test_full_visibility_observation_count(small_scene):
    prob, _ = small_scene
    assert prob.n_obs == prob.n_cams * prob.n_pts


def test_same_seed_same_file():
    cfg = SceneConfig(n_cams=5, n_pts=30, seed=11, visibility=0.8, pixel_noise_std=1e-3)
    assert rio.dumps_problem(generate(cfg)[0]) == rio.dumps_problem(generate(cfg)[0])
    other = SceneConfig(n_cams=5, n_pts=30, seed=12, visibility=0.8, pixel_noise_std=1e-3)
    assert rio.dumps_problem(generate(other)[0]) != rio.dumps_problem(generate(cfg)[0])


def test_ground_truth_is_calibrated_and_in_front(small_scene):
    prob, gt = small_scene
    assert all(is_rotation(r) for r in gt.rotations)
    x = np.einsum("kij,nj->kni", gt.rotations, gt.points) + gt.translations[:, None]
    assert np.all(x[..., 2] > 0)


def test_noiseless_measurements_are_exact_projections(small_scene):
    prob, gt = small_scene
    x = np.einsum("mij,mj->mi", gt.rotations[prob.obs_cam], gt.points[prob.obs_pt]) \
        + gt.translations[prob.obs_cam]
    assert np.allclose(prob.obs_m, x[:, :2] / x[:, 2:], atol=1e-15)


def test_ground_truth_zeroes_ose_and_rotation_terms(small_scene):
    """Noiseless data and exact priors: the OSE and rotation terms vanish at
    the truth.  The affine term does not (it needs every depth to equal 1)."""
    prob, gt = small_scene
    tb = objective_value(prob, gt.variables())
    assert tb.ose <= 1e-16 * prob.n_obs
    assert tb.rot <= 1e-16 * len(prob.priors)
    assert tb.aff > 1.0


def test_two_view_priors_match_truth(small_scene):
    prob, gt = small_scene
    assert len(prob.priors) == prob.n_cams * (prob.n_cams - 1) // 2
    for p in prob.priors:
        p.check()
        assert rotation_angle(p.r_tilde @ gt.relative_rotation(p.k, p.l).T) <= 1e-8


def test_noisy_two_view_priors_close_to_truth():
    prob, gt = generate(SceneConfig(n_cams=5, n_pts=60, seed=2, pixel_noise_std=1e-3))
    errs = [rotation_angle(p.r_tilde @ gt.relative_rotation(p.k, p.l).T) for p in prob.priors]
    assert 0 < np.mean(errs) <= np.deg2rad(1.0)
    assert max(errs) <= np.deg2rad(5.0)


def test_synthetic_priors():
    prob, gt = generate(SceneConfig(n_cams=5, n_pts=30, seed=1, prior_mode="synthetic"))
    for p in prob.priors:
        assert np.allclose(p.r_tilde, gt.relative_rotation(p.k, p.l), atol=1e-15)


@pytest.mark.parametrize("seed", range(5))
def test_half_visibility_prior_graph_connected(seed):
    prob, _ = generate(SceneConfig(n_cams=8, n_pts=80, seed=seed, visibility=0.5,
                                   covisibility_min=10, prior_mode="synthetic"))
    assert _connected(prob.n_cams, [(p.k, p.l) for p in prob.priors])
    assert np.all(np.bincount(prob.obs_pt, minlength=prob.n_pts) >= 2)


def test_sphere_cap_layout():
    prob, gt = generate(SceneConfig(n_cams=6, n_pts=30, seed=0, layout="sphere-cap",
                                    prior_mode="synthetic"))
    centers = -np.einsum("kji,kj->ki", gt.rotations, gt.translations)
    assert np.allclose(np.linalg.norm(centers, axis=1), 5.0)
    assert np.all(centers[:, 2] >= 5.0 * np.cos(np.deg2rad(60)) - 1e-12)


def test_noise_level():
    prob, gt = generate(SceneConfig(n_cams=4, n_pts=500, seed=0, pixel_noise_std=1e-3,
                                    prior_mode="synthetic"))
    x = np.einsum("mij,mj->mi", gt.rotations[prob.obs_cam], gt.points[prob.obs_pt]) \
        + gt.translations[prob.obs_cam]
    err = prob.obs_m - x[:, :2] / x[:, 2:]
    assert err.std() == pytest.approx(1e-3, rel=0.05)


def test_look_at_points_optical_axis():
    c = np.array([3.0, 1.0, -4.0])
    r = look_at(c)
    assert is_rotation(r)
    assert np.allclose(r @ (-c / np.linalg.norm(c)), [0, 0, 1])


@pytest.mark.parametrize("kw", [
    dict(n_cams=1), dict(n_pts=5), dict(layout="grid"), dict(visibility=0.0),
    dict(prior_mode="x"), dict(prior_graph="x"), dict(radius=0.5),
])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        SceneConfig(**kw)
