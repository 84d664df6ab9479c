from __future__ import annotations

from typing import List
from typing import Optional

from pydantic import BaseModel
from pydantic import Field

METRICS_COLUMNS = [
    "iter",
    "loss",
    "psnr",
    "n_gauss",
    "n_split",
    "n_clone",
    "n_prune",
    "n_gds_blocked",
    "ms_elapsed",
]


class MetricsRecord(BaseModel):
    """One row of the training metrics log."""

    iter: int
    loss: float
    psnr: float
    n_gauss: int
    n_split: int = 0
    n_clone: int = 0
    n_prune: int = 0
    n_gds_blocked: int = 0
    ms_elapsed: float = 0.0


class GdsSummary(BaseModel):
    """Statistics of nearest-neighbour GDS values over a cloud.

    Attributes:
        count (int): Number of Gaussians.
        minimum, median, maximum (float): Order statistics of the per-Gaussian GDS.
        bin_edges (List[float]): Histogram bin edges (len(counts) + 1 values).
        counts (List[int]): Histogram counts.
    """

    count: int
    minimum: float
    median: float
    maximum: float
    bin_edges: List[float] = Field(default_factory=list)
    counts: List[int] = Field(default_factory=list)


class ViewEvaluation(BaseModel):
    """Image-quality scores of one rendered view against its reference image."""

    view: int
    psnr: float
    ssim: float


class EvaluationReport(BaseModel):
    """Per-view scores, their means and an optional Chamfer distance."""

    views: List[ViewEvaluation]
    mean_psnr: float
    mean_ssim: float
    chamfer: Optional[float] = None
