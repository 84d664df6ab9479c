from __future__ import annotations

import numpy as np
import pytest

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.evaluation import chamfer_distance
from app.modules.evaluation import evaluate_views
from app.modules.evaluation import psnr
from app.modules.rasterizer import render
from app.modules.synth import ground_truth_cloud
from app.modules.synth import orbit_cameras
from app.schemas.config_schema import SynthConfig


@pytest.fixture(scope="module")
def scene():
    cloud = ground_truth_cloud(20, seed=2)
    cameras = orbit_cameras(SynthConfig(n_views=2, size=16))
    return cloud, [(cam, render(cloud, cam).color) for cam in cameras]


@pytest.mark.parametrize(
    "offset, expected",
    [
        (0.1, 20.0),
        (0.01, 40.0),
    ],
)
def test_psnr_constant_offset(offset, expected):
    a = np.full((4, 4, 3), 0.5)
    assert psnr(a, a + offset) == pytest.approx(expected)


def test_psnr_identical_is_infinite():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")


def test_psnr_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        psnr(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))


def test_chamfer_distance():
    a = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 0.5]])
    # a->b: 0.25 and 1.25, mean 0.75; b->a: 0.25
    assert chamfer_distance(a, b) == pytest.approx(1.0)
    assert chamfer_distance(a, a) == 0.0
    with pytest.raises(InvalidParameterError):
        chamfer_distance(a, np.zeros((0, 3)))


def test_evaluate_ground_truth(scene):
    cloud, views = scene
    report = evaluate_views(cloud, views, reference=cloud)
    assert [v.view for v in report.views] == [0, 1]
    assert report.mean_psnr == float("inf")
    assert report.mean_ssim == pytest.approx(1.0)
    assert report.chamfer == 0.0


def test_evaluate_perturbed_cloud(scene):
    cloud, views = scene
    moved = cloud.copy()
    moved.color = np.clip(moved.color + 0.1, 0.0, 1.0)
    report = evaluate_views(moved, views)
    assert np.isfinite(report.mean_psnr)
    assert report.mean_ssim < 1.0
    assert report.chamfer is None


def test_evaluate_requires_views(scene):
    cloud, _ = scene
    with pytest.raises(InvalidParameterError):
        evaluate_views(cloud, [])
