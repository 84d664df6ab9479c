from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg
from scipy.spatial.transform import Rotation

from app.exception_handlers import DegenerateGeometryError
from app.exception_handlers import InvalidParameterError
from app.modules.gaussians import Camera
from app.modules.gaussians import Gaussian3D
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import build_covariance
from app.modules.gaussians import build_covariances
from app.modules.gaussians import covariance_trace
from app.modules.gaussians import inv_spd
from app.modules.gaussians import normalize_quat
from app.modules.gaussians import quat_to_rotmat
from app.modules.gaussians import rotmat_quat_jacobian
from app.modules.gaussians import sqrt_spd


@pytest.fixture
def rng():
    return np.random.default_rng(7)


@pytest.fixture
def random_gaussians(rng):
    n = 1000
    return GaussianCloud(
        mu=rng.normal(size=(n, 3)),
        quat=rng.normal(size=(n, 4)),
        log_scale=rng.uniform(-3.0, 1.0, size=(n, 3)),
        logit_opacity=rng.normal(size=n),
        color=rng.uniform(size=(n, 3)),
    )


def test_build_covariance_identity():
    g = Gaussian3D(mu=np.zeros(3))
    np.testing.assert_allclose(build_covariance(g), np.eye(3), atol=1e-15)


def test_build_covariance_axis_scales():
    g = Gaussian3D(mu=np.zeros(3), log_scale=np.log([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(g.scale, [1.0, 2.0, 3.0], rtol=1e-12)
    np.testing.assert_allclose(build_covariance(g), np.diag([1.0, 4.0, 9.0]), atol=1e-12)


def test_build_covariance_matches_rotation_oracle(rng):
    q = normalize_quat(rng.normal(size=4))
    log_scale = rng.normal(size=3)
    g = Gaussian3D(mu=np.zeros(3), quat=q, log_scale=log_scale)
    # scipy uses (x, y, z, w) ordering
    rot = Rotation.from_quat([q[1], q[2], q[3], q[0]]).as_matrix()
    s = np.diag(np.exp(log_scale))
    expected = rot @ s @ s.T @ rot.T
    cov = build_covariance(g)
    np.testing.assert_allclose(cov, expected, atol=1e-12)
    np.testing.assert_array_equal(cov, cov.T)
    assert np.all(np.linalg.eigvalsh(cov) > 0.0)


def test_build_covariance_normalizes_quaternion():
    g = Gaussian3D(mu=np.zeros(3), quat=[2.0, 0.0, 0.0, 0.0], log_scale=np.log([1.0, 2.0, 3.0]))
    np.testing.assert_allclose(build_covariance(g), np.diag([1.0, 4.0, 9.0]), atol=1e-12)


@pytest.mark.parametrize(
    "field, value",
    [
        ("mu", [np.nan, 0.0, 0.0]),
        ("log_scale", [0.0, np.inf, 0.0]),
        ("quat", [np.nan, 0.0, 0.0, 0.0]),
    ],
)
def test_build_covariance_rejects_non_finite(field, value):
    g = Gaussian3D(mu=np.zeros(3))
    setattr(g, field, np.asarray(value))
    with pytest.raises(InvalidParameterError):
        build_covariance(g)


def test_trace_shortcut_identity(random_gaussians):
    cov = build_covariances(random_gaussians.quat, random_gaussians.log_scale)
    traces = np.trace(cov, axis1=1, axis2=2)
    assert np.max(np.abs(traces - covariance_trace(random_gaussians.log_scale)) / traces) <= 1e-10


def test_quat_to_rotmat_is_rotation(rng):
    rot = quat_to_rotmat(normalize_quat(rng.normal(size=(50, 4))))
    np.testing.assert_allclose(rot @ np.swapaxes(rot, 1, 2), np.broadcast_to(np.eye(3), (50, 3, 3)), atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(rot), 1.0, atol=1e-12)


def test_rotmat_jacobian_matches_finite_differences(rng):
    q = rng.normal(size=4)
    jac = rotmat_quat_jacobian(q)
    h = 1e-6
    for k in range(4):
        step = np.zeros(4)
        step[k] = h
        numeric = (quat_to_rotmat(q + step) - quat_to_rotmat(q - step)) / (2 * h)
        np.testing.assert_allclose(jac[k], numeric, atol=1e-8)


def test_normalize_quat_rejects_zero():
    with pytest.raises(InvalidParameterError):
        normalize_quat(np.zeros(4))


def test_sqrt_spd_squares_back(random_gaussians):
    cov = build_covariances(random_gaussians.quat[:200], random_gaussians.log_scale[:200])
    root = sqrt_spd(cov)
    np.testing.assert_allclose(root @ root, cov, atol=1e-8)
    np.testing.assert_allclose(root[0], np.real(scipy.linalg.sqrtm(cov[0])), atol=1e-8)


def test_sqrt_spd_rejects_negative_definite():
    with pytest.raises(InvalidParameterError):
        sqrt_spd(np.diag([1.0, 1.0, -1.0]))


def test_sqrt_spd_rejects_asymmetric():
    m = np.eye(3)
    m[0, 1] = 0.5
    with pytest.raises(InvalidParameterError):
        sqrt_spd(m)


def test_inv_spd_singular():
    with pytest.raises(DegenerateGeometryError):
        inv_spd(np.diag([1.0, 1.0, 0.0]))


def test_inv_spd_inverts(random_gaussians):
    cov = build_covariances(random_gaussians.quat[:10], random_gaussians.log_scale[:10])
    np.testing.assert_allclose(inv_spd(cov) @ cov, np.broadcast_to(np.eye(3), (10, 3, 3)), atol=1e-6)


def test_cloud_append_assigns_fresh_ids():
    cloud = GaussianCloud.from_gaussians([Gaussian3D(mu=[0, 0, 0]), Gaussian3D(mu=[1, 0, 0])])
    new_ids = cloud.append(
        mu=[[2.0, 0.0, 0.0]],
        quat=[[1.0, 0.0, 0.0, 0.0]],
        log_scale=[[0.0, 0.0, 0.0]],
        logit_opacity=[0.0],
        color=[[0.5, 0.5, 0.5]],
    )
    assert new_ids.tolist() == [2]
    assert cloud.ids.tolist() == [0, 1, 2]
    assert cloud.grad_accum.shape == (3, 2)
    kept = cloud.take(np.array([False, True, True]))
    assert kept.ids.tolist() == [1, 2]
    assert kept.next_id == 3


def test_cloud_rejects_duplicate_ids():
    with pytest.raises(InvalidParameterError):
        GaussianCloud(
            mu=np.zeros((2, 3)),
            quat=np.tile([1.0, 0.0, 0.0, 0.0], (2, 1)),
            log_scale=np.zeros((2, 3)),
            logit_opacity=np.zeros(2),
            color=np.zeros((2, 3)),
            ids=[4, 4],
        )


def test_cloud_item_round_trip(random_gaussians):
    g = random_gaussians[3]
    assert isinstance(g, Gaussian3D)
    np.testing.assert_array_equal(g.mu, random_gaussians.mu[3])
    assert g.opacity == pytest.approx(random_gaussians.opacity[3])


def test_camera_projection_and_center():
    cam = Camera(width=64, height=48, fx=50.0, fy=40.0, cx=32.0, cy=24.0, rot=np.eye(3), trans=[0.0, 0.0, 2.0])
    np.testing.assert_allclose(cam.project(np.array([[0.2, -0.1, 0.0]])), [[37.0, 22.0]])
    np.testing.assert_allclose(cam.center, [0.0, 0.0, -2.0])
    cam.validate()


def test_camera_validate_rejects_reflection():
    cam = Camera(width=8, height=8, fx=8, fy=8, cx=4, cy=4, rot=np.diag([1.0, 1.0, -1.0]), trans=np.zeros(3))
    with pytest.raises(InvalidParameterError):
        cam.validate()
