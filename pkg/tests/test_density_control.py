from __future__ import annotations

import numpy as np
import pytest
import scipy.linalg

from app.exception_handlers import DegenerateGeometryError
from app.modules.density_control import SpatialIndex
from app.modules.density_control import densify_and_prune
from app.modules.density_control import gds
from app.modules.density_control import gds_summary
from app.modules.density_control import nearest_gds
from app.modules.gaussians import Gaussian3D
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import build_covariance
from app.schemas.config_schema import GdsConfig
from app.schemas.config_schema import GdsForm


@pytest.fixture
def rng():
    return np.random.default_rng(17)


def random_gaussian(rng):
    return Gaussian3D(
        mu=rng.normal(size=3),
        quat=rng.normal(size=4),
        log_scale=rng.uniform(-1.5, 0.5, size=3),
    )


def dense_gds(g1, g2, form):
    cov1, cov2 = build_covariance(g1), build_covariance(g2)
    if form == "wasserstein":
        left = np.real(scipy.linalg.sqrtm(cov1))
    else:
        left = np.linalg.inv(cov1)
    cross = np.trace(np.real(scipy.linalg.sqrtm(left @ cov2 @ left)))
    return float(np.sum((g1.mu - g2.mu) ** 2) + np.trace(cov1) + np.trace(cov2) - 2.0 * cross)


def cloud_of(positions, log_scale=-2.0, opacity_logit=2.0):
    positions = np.asarray(positions, dtype=np.float64)
    n = len(positions)
    return GaussianCloud(
        mu=positions,
        quat=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scale=np.full((n, 3), log_scale),
        logit_opacity=np.full(n, opacity_logit),
        color=np.full((n, 3), 0.5),
    )


def test_gds_identical_is_zero(rng):
    g = random_gaussian(rng)
    assert gds(g, g) == pytest.approx(0.0, abs=1e-9)


def test_gds_isotropic_translation():
    g1 = Gaussian3D(mu=[0.0, 0.0, 0.0])
    g2 = Gaussian3D(mu=[3.0, 0.0, 0.0])
    assert gds(g1, g2) == pytest.approx(9.0, abs=1e-12)


@pytest.mark.parametrize("form", ["wasserstein", "literal"])
@pytest.mark.parametrize("seed", range(200))
def test_gds_matches_dense_oracle(seed, form):
    rng = np.random.default_rng(seed)
    g1, g2 = random_gaussian(rng), random_gaussian(rng)
    expected = dense_gds(g1, g2, form)
    if form == "wasserstein":
        expected = max(expected, 0.0)
    assert gds(g1, g2, form) == pytest.approx(expected, rel=1e-8, abs=1e-8)


def test_gds_wasserstein_symmetric(rng):
    for _ in range(25):
        g1, g2 = random_gaussian(rng), random_gaussian(rng)
        assert gds(g1, g2) == pytest.approx(gds(g2, g1), rel=1e-8, abs=1e-10)
        assert gds(g1, g2) >= 0.0


def test_gds_literal_singular_covariance():
    g1 = Gaussian3D(mu=[0.0, 0.0, 0.0], log_scale=[0.0, 0.0, -40.0])
    g2 = Gaussian3D(mu=[1.0, 0.0, 0.0])
    with pytest.raises(DegenerateGeometryError):
        gds(g1, g2, GdsForm.LITERAL)


def test_nearest_gds_collinear():
    cloud = cloud_of([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
    index = SpatialIndex.from_cloud(cloud)
    assert index.nearest().tolist() == [1, 0, 1]
    np.testing.assert_allclose(nearest_gds(cloud, index), [1.0, 1.0, 16.0], atol=1e-12)
    assert nearest_gds(cloud, index, 2) == pytest.approx(16.0)


def test_nearest_gds_two_gaussians():
    cloud = cloud_of([[0.0, 0.0, 0.0], [0.0, 2.0, 0.0]])
    index = SpatialIndex.from_cloud(cloud)
    values = nearest_gds(cloud, index)
    assert values[0] == pytest.approx(values[1])
    assert values[0] == pytest.approx(4.0)


def test_nearest_tie_breaks_on_smallest_id():
    cloud = cloud_of([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
    cloud.ids = np.array([10, 7, 3])
    index = SpatialIndex.from_cloud(cloud)
    # Rows 1 and 2 are equidistant from row 0; row 2 carries the smaller id.
    assert index.nearest([0]).tolist() == [2]


def test_nearest_matches_brute_force(rng):
    positions = rng.uniform(size=(500, 3))
    index = SpatialIndex(positions)
    d2 = np.sum((positions[:, None] - positions[None]) ** 2, axis=-1)
    np.fill_diagonal(d2, np.inf)
    np.testing.assert_array_equal(index.nearest(), np.argmin(d2, axis=1))


def test_nearest_gds_singleton():
    cloud = cloud_of([[0.0, 0.0, 0.0]])
    with pytest.raises(DegenerateGeometryError):
        nearest_gds(cloud, SpatialIndex.from_cloud(cloud))


def _with_gradients(cloud, value=1.0):
    cloud.grad_accum[:] = [value, 1.0]
    return cloud


def test_gds_gate_blocks_overlapping_pair():
    cloud = _with_gradients(cloud_of([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [3.0, 0.0, 0.0], [6.0, 0.0, 0.0]]))
    cfg = GdsConfig(threshold=0.1, grad_threshold=1e-3)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=1.0)
    assert report.n_gds_blocked == 2
    assert report.n_clone + report.n_split == 2


def test_gds_gate_disabled_at_zero_threshold():
    cloud = _with_gradients(cloud_of([[0.0, 0.0, 0.0], [0.001, 0.0, 0.0], [3.0, 0.0, 0.0]]))
    cfg = GdsConfig(threshold=0.0, grad_threshold=1e-3)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=1.0)
    assert report.n_gds_blocked == 0
    assert report.n_clone + report.n_split == 3


def test_relative_nearest_gds_closed_form():
    cloud = cloud_of([[0.0, 0.0, 0.0], [3.0, 0.0, 0.0]], log_scale=0.0)
    index = SpatialIndex.from_cloud(cloud)
    assert nearest_gds(cloud, index, 0) == pytest.approx(9.0)
    assert nearest_gds(cloud, index, 0, relative=True) == pytest.approx(1.5)


@pytest.mark.parametrize("relative, blocked, densified", [(False, 2, 0), (True, 0, 2)])
def test_gate_relative_to_gaussian_size(relative, blocked, densified):
    # Small Gaussians 0.15 apart: close in world units, far apart relative to their size.
    cloud = _with_gradients(cloud_of([[0.0, 0.0, 0.0], [0.15, 0.0, 0.0]], log_scale=np.log(0.01)))
    cfg = GdsConfig(threshold=0.1, relative=relative, grad_threshold=1e-3)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=10.0)
    assert report.n_gds_blocked == blocked
    assert report.n_clone + report.n_split == densified


@pytest.mark.parametrize("seed", range(5))
def test_relative_gate_ignores_scene_scale(seed):
    rng = np.random.default_rng(seed)
    positions = rng.uniform(size=(30, 3))
    log_scale = rng.uniform(-4.0, -2.0, size=(30, 3))

    def report_at(factor):
        cloud = _with_gradients(cloud_of(positions * factor))
        cloud.log_scale = log_scale + np.log(factor)
        cfg = GdsConfig(threshold=0.1, grad_threshold=1e-3)
        report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=np.sqrt(3.0) * factor)
        return report.n_gds_blocked, report.n_split, report.n_clone

    assert report_at(1.0) == report_at(4.0)


@pytest.mark.parametrize(
    "log_scale, grad, opacity_logit, expected",
    [
        # (n_split, n_clone, n_prune, final size)
        (-4.0, 1.0, 2.0, (0, 2, 0, 4)),
        (-0.5, 1.0, 2.0, (2, 0, 0, 4)),
        (-4.0, 0.0, 2.0, (0, 0, 0, 2)),
        (-4.0, 0.0, -10.0, (0, 0, 2, 0)),
    ],
)
def test_split_clone_prune_rules(log_scale, grad, opacity_logit, expected):
    cloud = cloud_of([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], log_scale=log_scale, opacity_logit=opacity_logit)
    _with_gradients(cloud, grad)
    cfg = GdsConfig(threshold=0.0, grad_threshold=1e-3, percent_dense=0.01)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=10.0)
    assert (report.n_split, report.n_clone, report.n_prune, len(cloud)) == expected
    assert len(report.origin) == len(cloud)
    np.testing.assert_array_equal(cloud.grad_accum, 0.0)


def test_clone_keeps_originals_and_marks_new_rows():
    cloud = _with_gradients(cloud_of([[0.0, 0.0, 0.0], [2.0, 0.0, 0.0]], log_scale=-4.0))
    before = cloud.ids.copy()
    cfg = GdsConfig(threshold=0.0, grad_threshold=1e-3)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(0), extent=10.0)
    assert report.origin.tolist() == [0, 1, -1, -1]
    assert cloud.ids[:2].tolist() == before.tolist()
    assert len(set(cloud.ids.tolist())) == 4
    np.testing.assert_array_equal(cloud.mu[2:], cloud.mu[:2])


def test_split_children_shrink():
    cloud = _with_gradients(cloud_of([[0.0, 0.0, 0.0]], log_scale=-0.5))
    cloud_parent_mu = cloud.mu.copy()
    cfg = GdsConfig(threshold=0.0, grad_threshold=1e-3, split_factor=1.6)
    report = densify_and_prune(cloud, cfg, np.random.default_rng(3), extent=1.0)
    assert report.n_split == 1
    assert report.origin.tolist() == [-1, -1]
    np.testing.assert_allclose(cloud.log_scale, -0.5 - np.log(1.6))
    assert np.all(np.linalg.norm(cloud.mu - cloud_parent_mu, axis=1) > 0.0)


def test_gds_summary_histogram(rng):
    cloud = cloud_of(rng.uniform(size=(40, 3)))
    summary = gds_summary(cloud, bins=5)
    assert summary.count == 40
    assert sum(summary.counts) == 40
    assert len(summary.bin_edges) == 6
    assert summary.minimum <= summary.median <= summary.maximum
