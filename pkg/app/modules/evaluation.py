from __future__ import annotations

import logging
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.spatial import cKDTree

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.gaussians import Camera
from app.modules.gaussians import GaussianCloud
from app.modules.losses import ssim
from app.modules.rasterizer import DEFAULT_SETTINGS
from app.modules.rasterizer import render
from app.schemas.config_schema import RasterSettings
from app.schemas.metrics_schema import EvaluationReport
from app.schemas.metrics_schema import ViewEvaluation

logger = logging.getLogger(__name__)


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB for images on a [0, 1] range; inf when equal."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError("image", f"{a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(-10.0 * np.log10(mse))


def chamfer_distance(points_a: np.ndarray, points_b: np.ndarray) -> float:
    """Symmetric Chamfer distance: mean squared nearest distance a→b plus b→a.

    Args:
        points_a (np.ndarray): (N, 3) points.
        points_b (np.ndarray): (M, 3) points.

    Returns:
        float: The Chamfer distance.

    Raises:
        InvalidParameterError: If either set is empty.
    """
    points_a = np.asarray(points_a, dtype=np.float64).reshape(-1, 3)
    points_b = np.asarray(points_b, dtype=np.float64).reshape(-1, 3)
    if len(points_a) == 0 or len(points_b) == 0:
        raise InvalidParameterError("points", "Chamfer distance needs non-empty point sets")
    d_ab, _ = cKDTree(points_b).query(points_a, k=1)
    d_ba, _ = cKDTree(points_a).query(points_b, k=1)
    return float(np.mean(d_ab**2) + np.mean(d_ba**2))


def evaluate_views(
    cloud: GaussianCloud,
    views: Sequence[Tuple[Camera, np.ndarray]],
    reference: Optional[GaussianCloud] = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
    threads: Optional[int] = None,
) -> EvaluationReport:
    """Render every view and score it against its image.

    Args:
        cloud (GaussianCloud): Fitted cloud.
        views: (camera, H×W×3 image) pairs.
        reference (GaussianCloud, optional): Ground-truth cloud for the Chamfer distance
            between Gaussian centres.
        settings (RasterSettings): Rasterizer constants.
        threads (int, optional): Worker threads.

    Returns:
        EvaluationReport: Per-view PSNR and SSIM, their means and the Chamfer distance.
    """
    if not views:
        raise InvalidParameterError("views", "at least one view is required")
    scores = []
    for cam, image in views:
        rendered = render(cloud, cam, settings, threads).color
        scores.append(ViewEvaluation(view=cam.id, psnr=psnr(rendered, image), ssim=ssim(rendered, image)))
        logger.debug("View %d: PSNR %.3f dB", cam.id, scores[-1].psnr)
    chamfer = None
    if reference is not None:
        chamfer = chamfer_distance(cloud.mu, reference.mu)
    return EvaluationReport(
        views=scores,
        mean_psnr=float(np.mean([s.psnr for s in scores])),
        mean_ssim=float(np.mean([s.ssim for s in scores])),
        chamfer=chamfer,
    )
