from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.signal import convolve2d
from scipy.signal import correlate2d

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.schemas.config_schema import LossWeights

logger = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2

# A perceptual term takes (renders, targets) and returns (value, per-view gradients).
PerceptualHook = Callable[[List[np.ndarray], List[np.ndarray]], Tuple[float, List[np.ndarray]]]


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Normalized 2D Gaussian window, the outer product of two 1D kernels."""
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    kernel = np.exp(-(ax**2) / (2.0 * sigma**2))
    kernel /= kernel.sum()
    return np.outer(kernel, kernel)


def _check_pairs(renders: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> None:
    if len(renders) == 0 or len(targets) == 0:
        raise InvalidParameterError("views", "at least one render/target pair is required")
    if len(renders) != len(targets):
        raise DimensionMismatchError(
            "views", f"{len(renders)} renders but {len(targets)} targets"
        )
    for i, (render, target) in enumerate(zip(renders, targets)):
        if np.shape(render) != np.shape(target):
            raise DimensionMismatchError(
                f"view {i}", f"render {np.shape(render)} vs target {np.shape(target)}"
            )


def l_rec(renders: Sequence[np.ndarray], targets: Sequence[np.ndarray]) -> float:
    """Reconstruction loss: per-view mean squared error, averaged over views.

    Args:
        renders: Rendered H×W×3 images.
        targets: Target images of the same shapes.

    Returns:
        float: (1/N)·Σ_s mean((target_s - render_s)²).
    """
    _check_pairs(renders, targets)
    return float(
        np.mean(
            [
                np.mean((np.asarray(t, dtype=np.float64) - np.asarray(r, dtype=np.float64)) ** 2)
                for r, t in zip(renders, targets)
            ]
        )
    )


@dataclass
class _SsimTerms:
    mu_a: np.ndarray
    mu_b: np.ndarray
    var_a: np.ndarray
    var_b: np.ndarray
    cov_ab: np.ndarray
    a1: np.ndarray
    a2: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    ssim_map: np.ndarray


def _ssim_channel(a: np.ndarray, b: np.ndarray, window: np.ndarray) -> _SsimTerms:
    def filt(x):
        return correlate2d(x, window, mode="valid")

    mu_a = filt(a)
    mu_b = filt(b)
    var_a = filt(a * a) - mu_a * mu_a
    var_b = filt(b * b) - mu_b * mu_b
    cov_ab = filt(a * b) - mu_a * mu_b
    a1 = 2.0 * mu_a * mu_b + SSIM_C1
    a2 = 2.0 * cov_ab + SSIM_C2
    b1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    b2 = var_a + var_b + SSIM_C2
    return _SsimTerms(
        mu_a, mu_b, var_a, var_b, cov_ab, a1, a2, b1, b2, (a1 * a2) / (b1 * b2)
    )


def _check_ssim_input(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError("image", f"{a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.ndim != 3:
        raise DimensionMismatchError("image", f"expected H×W×C, got {a.shape}")
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise DimensionMismatchError(
            "image", f"{a.shape[:2]} is smaller than the {SSIM_WINDOW}×{SSIM_WINDOW} window"
        )
    return a, b


def ssim(a: np.ndarray, b: np.ndarray) -> float:
    """Mean structural similarity of two images on a [0, 1] dynamic range.

    An 11×11 Gaussian window (σ = 1.5) is applied without padding; the local SSIM map is
    averaged over positions and then over channels.

    Args:
        a (np.ndarray): H×W×C (or H×W) image.
        b (np.ndarray): Image of the same shape.

    Returns:
        float: SSIM in [-1, 1].

    Raises:
        DimensionMismatchError: If shapes differ or the image is smaller than the window.
    """
    a, b = _check_ssim_input(a, b)
    window = gaussian_window()
    return float(
        np.mean([np.mean(_ssim_channel(a[..., ch], b[..., ch], window).ssim_map) for ch in range(a.shape[2])])
    )


def ssim_with_grad(a: np.ndarray, b: np.ndarray) -> Tuple[float, np.ndarray]:
    """SSIM and its gradient with respect to the first image."""
    a, b = _check_ssim_input(a, b)
    window = gaussian_window()
    n_channels = a.shape[2]
    values = []
    grad = np.zeros_like(a)
    for ch in range(n_channels):
        terms = _ssim_channel(a[..., ch], b[..., ch], window)
        values.append(np.mean(terms.ssim_map))
        scale = 1.0 / (terms.ssim_map.size * n_channels)
        s = terms.ssim_map
        d_mu_a = (2.0 * terms.mu_b * terms.a2 / (terms.b1 * terms.b2) - s * 2.0 * terms.mu_a / terms.b1)
        d_var_a = -s / terms.b2
        d_cov = 2.0 * terms.a1 / (terms.b1 * terms.b2)
        # var_a = f(a²) - μa², cov = f(ab) - μaμb.
        g_mu = (d_mu_a - 2.0 * terms.mu_a * d_var_a - terms.mu_b * d_cov) * scale
        g_aa = d_var_a * scale
        g_ab = d_cov * scale
        grad[..., ch] = (
            convolve2d(g_mu, window, mode="full")
            + 2.0 * a[..., ch] * convolve2d(g_aa, window, mode="full")
            + b[..., ch] * convolve2d(g_ab, window, mode="full")
        )
    return float(np.mean(values)), grad


def no_perceptual_loss(
    renders: List[np.ndarray], targets: List[np.ndarray]
) -> Tuple[float, List[np.ndarray]]:
    """Default perceptual hook: contributes nothing."""
    return 0.0, [np.zeros_like(np.asarray(r, dtype=np.float64)) for r in renders]


@dataclass
class LossResult:
    """Value and per-view gradient images of the total loss."""

    total: float
    rec: float
    ssim: float
    perceptual: float
    grads: List[np.ndarray]


def total_loss(
    renders: Sequence[np.ndarray],
    targets: Sequence[np.ndarray],
    weights: Optional[LossWeights] = None,
    perceptual: PerceptualHook = no_perceptual_loss,
) -> LossResult:
    """L = L_rec + λ1·(1 - mean SSIM) + λ2·L_perceptual, with gradients per render.

    Args:
        renders: Rendered H×W×3 images.
        targets: Target images.
        weights (LossWeights): λ1 and λ2; defaults to 0.02 and 0.01.
        perceptual: Hook computing the perceptual term (zero by default).

    Returns:
        LossResult: Loss value, its terms and ∂L/∂render for every view.
    """
    weights = weights or LossWeights()
    _check_pairs(renders, targets)
    renders = [np.asarray(r, dtype=np.float64) for r in renders]
    targets = [np.asarray(t, dtype=np.float64) for t in targets]
    n_views = len(renders)

    rec = l_rec(renders, targets)
    grads = [2.0 * (r - t) / (r.size * n_views) for r, t in zip(renders, targets)]

    mean_ssim = 1.0
    if weights.lambda1 > 0.0:
        values = []
        for i, (r, t) in enumerate(zip(renders, targets)):
            value, grad = ssim_with_grad(r, t)
            values.append(value)
            grads[i] = grads[i] - weights.lambda1 * grad.reshape(r.shape) / n_views
        mean_ssim = float(np.mean(values))

    perceptual_value = 0.0
    if weights.lambda2 > 0.0:
        perceptual_value, perceptual_grads = perceptual(renders, targets)
        for i, grad in enumerate(perceptual_grads):
            grads[i] = grads[i] + weights.lambda2 * grad

    total = rec + weights.lambda1 * (1.0 - mean_ssim) + weights.lambda2 * perceptual_value
    return LossResult(
        total=float(total),
        rec=rec,
        ssim=mean_ssim,
        perceptual=float(perceptual_value),
        grads=grads,
    )
