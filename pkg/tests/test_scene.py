"""Cloud/camera/SH oracles: covariance eigenstructure, camera conventions, basis values."""

import numpy as np
import pytest

from dynsplat import autodiff as ad
from dynsplat import geom, scene


def small_cloud(p=4, degree=1, seed=0):
    rng = np.random.default_rng(seed)
    b = scene.sh_band_count(degree)
    return scene.GaussianCloud(
        means=rng.standard_normal((p, 3)),
        log_scales=rng.standard_normal((p, 3)) * 0.2 - 1.0,
        quats=rng.standard_normal((p, 4)),
        opacity_logits=rng.standard_normal(p),
        sh=rng.standard_normal((p, b, 3)) * 0.3,
    )


def test_cloud_validate_passes_and_catches_errors():
    cloud = small_cloud().validate()
    bad = cloud.copy()
    bad.means = bad.means[:2]
    with pytest.raises(ValueError):
        bad.validate()
    bad2 = cloud.copy()
    bad2.sh = np.zeros((len(cloud), 5, 3))  # 5 is not a square band count
    with pytest.raises(ValueError):
        bad2.validate()
    bad3 = cloud.copy()
    bad3.opacity_logits[0] = np.nan
    with pytest.raises(ValueError):
        bad3.validate()


def test_isotropic_covariance_is_scaled_identity():
    ls = np.log(np.full((1, 3), 0.7))
    q = np.array([[1.0, 0, 0, 0]])
    cov = scene.build_covariances(ls, q)[0]
    np.testing.assert_allclose(cov, 0.49 * np.eye(3), atol=1e-14)


def test_covariance_eigenvalues_are_squared_scales():
    rng = np.random.default_rng(3)
    ls = rng.standard_normal((6, 3)) * 0.5
    q = rng.standard_normal((6, 4))
    covs = scene.build_covariances(ls, q)
    np.testing.assert_allclose(covs, np.swapaxes(covs, -1, -2), atol=1e-12)
    for cov, l in zip(covs, ls):
        eig = np.sort(np.linalg.eigvalsh(cov))
        np.testing.assert_allclose(eig, np.sort(np.exp(2 * l)), rtol=1e-9)


def test_covariance_graph_matches_numpy():
    rng = np.random.default_rng(4)
    ls, q = rng.standard_normal((5, 3)), rng.standard_normal((5, 4))
    got = scene.build_covariances(ad.Tensor(ls, requires_grad=True), ad.Tensor(q))
    np.testing.assert_array_equal(ad.data_of(got), scene.build_covariances(ls, q))


def test_gaussian_density_peak_and_falloff():
    cov = np.diag([1.0, 4.0, 0.25])
    mean = np.array([1.0, -1.0, 0.0])
    assert scene.gaussian_density(mean, cov, mean[None])[0] == 1.0
    # one standard deviation along y
    v = scene.gaussian_density(mean, cov, (mean + [0, 2, 0])[None])[0]
    np.testing.assert_allclose(v, np.exp(-0.5))


def test_identity_camera_to_world_gives_identity():
    cam = scene.Camera.from_camera_angle(np.pi / 2, 64, 48, np.eye(4))
    np.testing.assert_array_equal(cam.world_to_camera, np.eye(4))
    np.testing.assert_allclose(cam.fx, 32.0)  # fov 90 deg -> fx = W/2
    np.testing.assert_allclose(cam.fy, 32.0)
    np.testing.assert_allclose([cam.cx, cam.cy], [32.0, 24.0])
    np.testing.assert_allclose(cam.camera_angle_x, np.pi / 2)


def test_camera_center_matches_camera_to_world_translation():
    rng = np.random.default_rng(5)
    c2w = np.eye(4)
    c2w[:3, :3] = geom.so3_exp(rng.standard_normal(3))
    c2w[:3, 3] = [1.0, 2.0, 3.0]
    cam = scene.Camera.from_camera_angle(1.0, 32, 32, c2w)
    np.testing.assert_allclose(cam.center, [1.0, 2.0, 3.0], atol=1e-12)
    np.testing.assert_allclose(cam.camera_to_world(), c2w, atol=1e-12)


def test_sh_basis_axis_directions():
    z = np.array([[0.0, 0.0, 1.0]])
    basis = scene.sh_basis(z, 2)[0]
    np.testing.assert_allclose(basis[0], scene.SH_C0)
    np.testing.assert_allclose(basis[1:4], [0.0, scene.SH_C1, 0.0], atol=1e-15)
    # band 2 at +z: only the (2z^2 - x^2 - y^2) column is active
    np.testing.assert_allclose(
        basis[4:9], [0, 0, scene.SH_C2[2] * 2.0, 0, 0], atol=1e-15
    )
    x = np.array([[1.0, 0.0, 0.0]])
    np.testing.assert_allclose(scene.sh_basis(x, 1)[0, 1:], [0.0, 0.0, -scene.SH_C1], atol=1e-15)


def test_sh_to_rgb_dc_only_and_clamp():
    sh = np.zeros((2, 1, 3))
    sh[0, 0] = 1.0
    sh[1, 0] = -10.0  # drives the color negative, must clamp to 0
    dirs = np.tile([[0.0, 0.0, 1.0]], (2, 1))
    rgb = scene.sh_to_rgb(sh, dirs, 0)
    np.testing.assert_allclose(rgb[0], scene.SH_C0 + 0.5)
    np.testing.assert_allclose(rgb[1], 0.0)


def test_sh_to_rgb_reads_lower_degree_prefix():
    rng = np.random.default_rng(6)
    sh = rng.standard_normal((3, 16, 3))
    dirs = rng.standard_normal((3, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    full = scene.sh_to_rgb(sh, dirs, 0)
    np.testing.assert_allclose(full, np.maximum(scene.SH_C0 * sh[:, 0] + 0.5, 0.0))


def test_extent_is_bbox_diagonal():
    cloud = small_cloud()
    cloud.means = np.array([[0.0, 0, 0], [3.0, 4.0, 0.0], [1.0, 1.0, 0.0], [2.0, 0.0, 0.0]])
    np.testing.assert_allclose(cloud.extent(), 5.0)


def test_frameset_times_sorted_unique():
    cam = scene.Camera.from_camera_angle(1.0, 8, 8, np.eye(4))
    fs = scene.FrameSet([scene.Frame(cam, t) for t in [0.5, 0.0, 0.5, 1.0]])
    np.testing.assert_array_equal(fs.times(), [0.0, 0.5, 1.0])
