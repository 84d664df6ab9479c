from __future__ import annotations

from enum import Enum
from typing import Optional

from pydantic import BaseModel
from pydantic import Field
from pydantic import model_validator


class GdsForm(str, Enum):
    """Which matrix enters the trace term of the GDS metric.

    ``wasserstein`` uses Σ₁^{1/2}Σ₂Σ₁^{1/2} (the 2-Wasserstein distance, zero for identical
    Gaussians); ``literal`` uses Σ₁⁻¹Σ₂Σ₁⁻¹.
    """

    WASSERSTEIN = "wasserstein"
    LITERAL = "literal"


class GdsConfig(BaseModel):
    """Adaptive density control settings, including the GDS gate.

    Attributes:
        threshold (float): Minimum nearest-neighbour GDS for a Gaussian to be split or cloned.
        form (GdsForm): GDS variant.
        relative (bool): Compare GDS divided by tr(Σᵢ) + tr(Σⱼ) of the pair, which does not
            depend on the scene scale, instead of the raw value.
        grad_threshold (float): Minimum mean screen-space positional gradient.
        densify_interval (int): Densify every this many iterations.
        warmup (int): First iteration at which densification may run.
        densify_until (int, optional): Last iteration at which densification may run.
        prune_opacity (float): Gaussians with activated opacity below this are pruned.
        split_factor (float): Children scales are the parent's divided by this factor.
        percent_dense (float): Split when the largest scale exceeds this fraction of the
            scene bounding-box diagonal, clone otherwise.
    """

    threshold: float = Field(
        0.1,
        ge=0.0,
        title="GDS threshold",
        description="Minimum nearest-neighbour GDS for a Gaussian to be split or cloned.",
    )
    form: GdsForm = Field(GdsForm.WASSERSTEIN, title="GDS form")
    relative: bool = Field(
        True,
        title="Scale-relative gate",
        description="Divide each GDS by the summed covariance traces of the pair before gating.",
    )
    grad_threshold: float = Field(2e-4, ge=0.0, title="Gradient threshold")
    densify_interval: int = Field(100, ge=1, title="Densify interval")
    warmup: int = Field(500, ge=0, title="Warm-up iterations")
    densify_until: Optional[int] = Field(None, ge=0, title="Densify until")
    prune_opacity: float = Field(0.005, ge=0.0, lt=1.0, title="Prune opacity")
    split_factor: float = Field(1.6, gt=1.0, title="Split factor")
    percent_dense: float = Field(0.01, gt=0.0, title="Split size criterion")

    class Config:
        """Pydantic model configuration.

        JSON Schema Extra:
        - Includes examples of the configuration structure.
        """

        json_schema_extra = {
            "examples": [
                {
                    "threshold": 0.1,
                    "form": "wasserstein",
                    "relative": True,
                    "grad_threshold": 0.0002,
                    "densify_interval": 100,
                    "warmup": 500,
                    "prune_opacity": 0.005,
                    "split_factor": 1.6,
                },
            ],
        }


class LossWeights(BaseModel):
    """Weights of the structural and perceptual loss terms.

    Attributes:
        lambda1 (float): Weight of the (1 - SSIM) term.
        lambda2 (float): Weight of the perceptual term (a no-op hook unless one is plugged in).
    """

    lambda1: float = Field(0.02, ge=0.0, title="SSIM weight")
    lambda2: float = Field(0.01, ge=0.0, title="Perceptual weight")


class LearningRates(BaseModel):
    """Per-parameter-group learning rates.

    The position rate is multiplied by the scene extent and decays exponentially to
    ``position_final``; with ``uniform`` set every group uses ``uniform_lr`` instead.
    """

    position: float = Field(1.6e-4, gt=0.0)
    position_final: float = Field(1.6e-6, gt=0.0)
    color: float = Field(2.5e-3, gt=0.0)
    opacity: float = Field(5e-2, gt=0.0)
    scale: float = Field(5e-3, gt=0.0)
    rotation: float = Field(1e-3, gt=0.0)
    uniform: bool = False
    uniform_lr: float = Field(1e-4, gt=0.0)


class TrainConfig(BaseModel):
    """Per-scene optimization settings.

    Attributes:
        iters (int): Number of optimization iterations.
        n_init (int): Number of randomly initialized Gaussians.
        lr (LearningRates): Per-group learning rates.
        beta1, beta2 (float): Moment decay rates of the adaptive update.
        eps (float): Denominator floor of the adaptive update.
        weight_decay (float): Decoupled weight decay.
        gds (GdsConfig): Density control settings.
        loss (LossWeights): Loss weights.
        seed (int): Seed of the counter-based random generator.
        max_views_per_iter (int): Scenes with more views render one random view per iteration.
        log_interval (int): Log progress every this many iterations.
        checkpoint_interval (int): Write a PLY checkpoint every this many iterations (0 = off).
        record_timing (bool): Record wall time in the metrics log; off keeps reruns byte-identical.
    """

    iters: int = Field(2000, ge=0)
    n_init: int = Field(100, ge=1)
    lr: LearningRates = Field(default_factory=LearningRates)
    beta1: float = Field(0.9, gt=0.0, lt=1.0)
    beta2: float = Field(0.999, gt=0.0, lt=1.0)
    eps: float = Field(1e-15, gt=0.0)
    weight_decay: float = Field(0.0, ge=0.0)
    gds: GdsConfig = Field(default_factory=GdsConfig)
    loss: LossWeights = Field(default_factory=LossWeights)
    seed: int = Field(0, ge=0)
    max_views_per_iter: int = Field(8, ge=1)
    log_interval: int = Field(100, ge=1)
    checkpoint_interval: int = Field(0, ge=0)
    record_timing: bool = False


class RasterSettings(BaseModel):
    """Constants of the rasterizer.

    Attributes:
        low_pass (float): Added to the diagonal of every 2D covariance, in px².
        alpha_max (float): Upper clamp of per-splat alpha.
        min_transmittance (float): A pixel stops blending once transmittance drops below this.
        alpha_cutoff (float): Contributions weaker than this are outside a splat's box.
        min_extent_sigma (float): Box half-size is never less than this many standard deviations.
        min_det (float): Splats whose 2D covariance determinant is below this are skipped.
        row_block (int): Pixel rows per work item.
    """

    low_pass: float = Field(0.3, ge=0.0)
    alpha_max: float = Field(0.99, gt=0.0, lt=1.0)
    min_transmittance: float = Field(1e-4, ge=0.0, lt=1.0)
    alpha_cutoff: float = Field(1e-9, gt=0.0, lt=1.0)
    min_extent_sigma: float = Field(3.0, gt=0.0)
    min_det: float = Field(1e-12, ge=0.0)
    row_block: int = Field(8, ge=1)


class SceneBounds(BaseModel):
    """Axis-aligned scene box."""

    lower: tuple[float, float, float] = (-0.5, -0.5, -0.5)
    upper: tuple[float, float, float] = (0.5, 0.5, 0.5)

    @model_validator(mode="after")
    def _non_degenerate(self) -> "SceneBounds":
        if any(hi <= lo for lo, hi in zip(self.lower, self.upper)):
            raise ValueError("scene bounds must satisfy lower < upper on every axis")
        return self

    @property
    def diagonal(self) -> float:
        return float(sum((hi - lo) ** 2 for lo, hi in zip(self.lower, self.upper)) ** 0.5)


class SynthPreset(str, Enum):
    ORBIT = "orbit"


class SynthConfig(BaseModel):
    """Self-reconstruction fixture settings.

    Attributes:
        preset (SynthPreset): Camera layout; ``orbit`` is an inward-facing ring with
            alternating elevation.
        n_views (int): Number of cameras.
        size (int): Square image size in pixels.
        n_gaussians (int): Ground-truth cloud size.
        radius (float): Orbit radius around the scene centre.
        elevation (float): Camera elevation in degrees, alternating sign between views.
        fov (float): Horizontal field of view in degrees.
        seed (int): Generator seed.
    """

    preset: SynthPreset = SynthPreset.ORBIT
    n_views: int = Field(16, ge=1)
    size: int = Field(64, ge=1)
    n_gaussians: int = Field(50, ge=1)
    radius: float = Field(2.5, gt=0.0)
    elevation: float = Field(20.0, gt=-90.0, lt=90.0)
    fov: float = Field(45.0, gt=0.0, lt=180.0)
    seed: int = Field(0, ge=0)
