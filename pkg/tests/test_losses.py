from __future__ import annotations

import numpy as np
import pytest
from skimage.metrics import structural_similarity

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.losses import gaussian_window
from app.modules.losses import l_rec
from app.modules.losses import ssim
from app.modules.losses import ssim_with_grad
from app.modules.losses import total_loss
from app.schemas.config_schema import LossWeights


@pytest.fixture
def images():
    rng = np.random.default_rng(4)
    a = rng.uniform(size=(24, 20, 3))
    b = np.clip(a + rng.normal(scale=0.1, size=a.shape), 0.0, 1.0)
    return a, b


def test_l_rec_closed_form():
    black = np.zeros((4, 4, 3))
    half = np.full((4, 4, 3), 0.5)
    assert l_rec([black], [half]) == pytest.approx(0.25)


def test_l_rec_matches_loop(images):
    a, b = images
    c = np.zeros_like(a)
    expected = 0.0
    for render, target in [(a, b), (c, b)]:
        total = 0.0
        for value in (target - render).ravel():
            total += value * value
        expected += total / render.size
    assert l_rec([a, c], [b, b]) == pytest.approx(expected / 2, rel=1e-12)


@pytest.mark.parametrize(
    "renders, targets",
    [
        ([], []),
        ([np.zeros((4, 4, 3))], []),
    ],
)
def test_l_rec_rejects_empty_or_unpaired(renders, targets):
    with pytest.raises((InvalidParameterError, DimensionMismatchError)):
        l_rec(renders, targets)


def test_l_rec_shape_mismatch():
    with pytest.raises(DimensionMismatchError):
        l_rec([np.zeros((4, 4, 3))], [np.zeros((4, 5, 3))])


def test_gaussian_window_normalized():
    window = gaussian_window()
    assert window.shape == (11, 11)
    assert window.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(window, window.T)


def test_ssim_self_similarity(images):
    a, _ = images
    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetric(images):
    a, b = images
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_ssim_matches_skimage(images):
    a, b = images
    expected_map = structural_similarity(
        a,
        b,
        gaussian_weights=True,
        sigma=1.5,
        use_sample_covariance=False,
        data_range=1.0,
        channel_axis=2,
        full=True,
    )[1]
    # skimage pads the borders; compare over positions where the full window fits.
    valid = expected_map[5:-5, 5:-5].mean()
    assert ssim(a, b) == pytest.approx(valid, abs=1e-6)


def test_ssim_penalizes_constant_offset():
    rng = np.random.default_rng(9)
    a = rng.uniform(0.0, 0.5, size=(16, 16, 3))
    assert 1.0 - ssim(a, a + 0.5) > 0.1


def test_ssim_too_small():
    with pytest.raises(DimensionMismatchError):
        ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_grad_matches_finite_differences(images):
    a, b = images
    value, grad = ssim_with_grad(a, b)
    assert value == pytest.approx(ssim(a, b))
    rng = np.random.default_rng(0)
    h = 1e-6
    for _ in range(20):
        index = tuple(rng.integers(0, s) for s in a.shape)
        plus, minus = a.copy(), a.copy()
        plus[index] += h
        minus[index] -= h
        numeric = (ssim(plus, b) - ssim(minus, b)) / (2 * h)
        assert grad[index] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


def test_total_loss_reduces_to_l_rec(images):
    a, b = images
    result = total_loss([a], [b], LossWeights(lambda1=0.0, lambda2=0.0))
    assert result.total == pytest.approx(l_rec([a], [b]))
    np.testing.assert_allclose(result.grads[0], 2.0 * (a - b) / a.size)


def test_total_loss_default_weights(images):
    a, b = images
    result = total_loss([a], [b])
    assert result.total == pytest.approx(l_rec([a], [b]) + 0.02 * (1.0 - ssim(a, b)))
    assert result.perceptual == 0.0


def test_total_loss_calls_perceptual_hook(images):
    a, b = images
    calls = []

    def hook(renders, targets):
        calls.append(len(renders))
        return 2.0, [np.ones_like(r) for r in renders]

    base = total_loss([a], [b], LossWeights(lambda1=0.0, lambda2=0.0))
    result = total_loss([a], [b], LossWeights(lambda1=0.0, lambda2=0.5), perceptual=hook)
    assert calls == [1]
    assert result.total == pytest.approx(base.total + 1.0)
    np.testing.assert_allclose(result.grads[0], base.grads[0] + 0.5)


def test_total_loss_grad_matches_finite_differences():
    rng = np.random.default_rng(12)
    renders = [rng.uniform(size=(12, 14, 3)) for _ in range(2)]
    targets = [rng.uniform(size=(12, 14, 3)) for _ in range(2)]
    weights = LossWeights(lambda1=0.3, lambda2=0.0)
    result = total_loss(renders, targets, weights)
    h = 1e-6
    for view in range(2):
        for _ in range(15):
            index = tuple(rng.integers(0, s) for s in renders[view].shape)
            original = renders[view][index]
            renders[view][index] = original + h
            plus = total_loss(renders, targets, weights).total
            renders[view][index] = original - h
            minus = total_loss(renders, targets, weights).total
            renders[view][index] = original
            numeric = (plus - minus) / (2 * h)
            assert result.grads[view][index] == pytest.approx(numeric, rel=1e-4, abs=1e-9)


@pytest.mark.parametrize("seed", range(100))
def test_l_rec_zero_iff_equal(seed):
    rng = np.random.default_rng(seed)
    shape = (int(rng.integers(1, 12)), int(rng.integers(1, 12)), 3)
    views = [rng.uniform(size=shape) for _ in range(int(rng.integers(1, 4)))]
    assert l_rec(views, [view.copy() for view in views]) == 0.0

    perturbed = [view.copy() for view in views]
    target = perturbed[int(rng.integers(len(perturbed)))]
    target[tuple(int(rng.integers(n)) for n in shape)] += rng.choice([-1.0, 1.0]) * rng.uniform(1e-3, 1.0)
    assert l_rec(views, perturbed) > 0.0
