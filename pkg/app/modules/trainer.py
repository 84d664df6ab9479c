from __future__ import annotations

import logging
import os
import time
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.exception_handlers import TrainingDivergedError
from app.modules.density_control import densify_and_prune
from app.modules.density_control import scene_extent
from app.modules.evaluation import psnr
from app.modules.gaussians import PARAM_GROUPS
from app.modules.gaussians import Camera
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import inverse_sigmoid
from app.modules.losses import PerceptualHook
from app.modules.losses import no_perceptual_loss
from app.modules.losses import total_loss
from app.modules.ply_io import save_ply
from app.modules.rasterizer import DEFAULT_SETTINGS
from app.modules.rasterizer import CloudGradients
from app.modules.rasterizer import render
from app.modules.rasterizer import render_backward
from app.modules.telemetry import TrainingTelemetry
from app.schemas.config_schema import RasterSettings
from app.schemas.config_schema import SceneBounds
from app.schemas.config_schema import TrainConfig
from app.schemas.metrics_schema import METRICS_COLUMNS
from app.schemas.metrics_schema import MetricsRecord

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]
View = Tuple[Camera, np.ndarray]

INIT_OPACITY = 0.1
INIT_COLOR = 0.5


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator; the same seed gives the same stream on every platform."""
    return np.random.Generator(np.random.Philox(seed))


def _bounds_arrays(bounds: Optional[SceneBounds]) -> Tuple[np.ndarray, np.ndarray]:
    bounds = bounds or SceneBounds()
    lower = np.asarray(bounds.lower, dtype=np.float64)
    upper = np.asarray(bounds.upper, dtype=np.float64)
    if not (np.all(np.isfinite(lower)) and np.all(np.isfinite(upper))) or np.any(upper <= lower):
        raise InvalidParameterError("bounds", f"degenerate box {lower.tolist()} .. {upper.tolist()}")
    return lower, upper


def init_cloud(n: int, bounds: Optional[SceneBounds] = None, seed: int = 0) -> GaussianCloud:
    """Random initial cloud inside an axis-aligned box.

    Positions are uniform in the box, scales isotropic at the mean nearest-neighbour
    spacing, opacity 0.1, color mid-gray and rotations identity. A single Gaussian sits at
    the box centre with a quarter of the smallest side as its scale.

    Args:
        n (int): Number of Gaussians, at least 1.
        bounds (SceneBounds, optional): Sampling box; the unit cube by default.
        seed (int): Generator seed.

    Returns:
        GaussianCloud: The initial cloud with ids 0..n-1.

    Raises:
        InvalidParameterError: If n < 1 or the box is degenerate.
    """
    if n < 1:
        raise InvalidParameterError("n", f"need at least one Gaussian, got {n}")
    lower, upper = _bounds_arrays(bounds)
    if n == 1:
        mu = (0.5 * (lower + upper))[None]
        spacing = 0.25 * float(np.min(upper - lower))
    else:
        mu = make_rng(seed).uniform(lower, upper, size=(n, 3))
        distances, _ = cKDTree(mu).query(mu, k=2)
        spacing = float(np.mean(distances[:, 1]))
        if spacing <= 0.0:
            spacing = 0.25 * float(np.min(upper - lower))
    return GaussianCloud(
        mu=mu,
        quat=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        log_scale=np.full((n, 3), np.log(spacing)),
        logit_opacity=np.full(n, inverse_sigmoid(INIT_OPACITY)),
        color=np.full((n, 3), INIT_COLOR),
    )


class AdamW:
    """Adaptive moment update with decoupled weight decay, one state per parameter group.

    Moment arrays follow the cloud through densification via ``remap``.
    """

    def __init__(
        self,
        cloud: GaussianCloud,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-15,
        weight_decay: float = 0.0,
    ):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.step_count = 0
        self.exp_avg = {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_GROUPS}
        self.exp_avg_sq = {name: np.zeros_like(getattr(cloud, name)) for name in PARAM_GROUPS}

    def __len__(self) -> int:
        return len(self.exp_avg["mu"])

    def step(self, cloud: GaussianCloud, grads: Dict[str, np.ndarray], lrs: Dict[str, float]) -> None:
        self.step_count += 1
        bias1 = 1.0 - self.beta1**self.step_count
        bias2 = 1.0 - self.beta2**self.step_count
        for name in PARAM_GROUPS:
            lr = lrs[name]
            grad = grads[name]
            param = getattr(cloud, name)
            if self.weight_decay:
                param = param * (1.0 - lr * self.weight_decay)
            m = self.beta1 * self.exp_avg[name] + (1.0 - self.beta1) * grad
            v = self.beta2 * self.exp_avg_sq[name] + (1.0 - self.beta2) * grad * grad
            self.exp_avg[name], self.exp_avg_sq[name] = m, v
            setattr(cloud, name, param - lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps))

    def remap(self, origin: np.ndarray) -> None:
        """Reorder moments to a new cloud layout; rows with origin -1 start from zero."""
        origin = np.asarray(origin, dtype=np.int64)
        kept = origin >= 0
        for state in (self.exp_avg, self.exp_avg_sq):
            for name, old in state.items():
                new = np.zeros((len(origin),) + old.shape[1:])
                new[kept] = old[origin[kept]]
                state[name] = new


@dataclass
class TrainState:
    """Everything the optimization loop carries between iterations."""

    cloud: GaussianCloud
    optimizer: AdamW
    rng: np.random.Generator
    iteration: int = 0
    extent: float = 1.0


@dataclass
class FitResult:
    cloud: GaussianCloud
    metrics: pd.DataFrame
    state: TrainState
    records: List[MetricsRecord] = field(default_factory=list)


def position_lr(iteration: int, cfg: TrainConfig, extent: float) -> float:
    """Log-linear decay from ``lr.position`` to ``lr.position_final``, times the extent."""
    t = np.clip(iteration / max(cfg.iters, 1), 0.0, 1.0)
    log_lr = (1.0 - t) * np.log(cfg.lr.position) + t * np.log(cfg.lr.position_final)
    return float(np.exp(log_lr) * extent)


def learning_rates(iteration: int, cfg: TrainConfig, extent: float) -> Dict[str, float]:
    if cfg.lr.uniform:
        return {name: cfg.lr.uniform_lr for name in PARAM_GROUPS}
    return {
        "mu": position_lr(iteration, cfg, extent),
        "quat": cfg.lr.rotation,
        "log_scale": cfg.lr.scale,
        "logit_opacity": cfg.lr.opacity,
        "color": cfg.lr.color,
    }


def densify_due(iteration: int, cfg: TrainConfig) -> bool:
    gds = cfg.gds
    if iteration < gds.warmup or iteration % gds.densify_interval != 0:
        return False
    return gds.densify_until is None or iteration <= gds.densify_until


def metrics_frame(records: Sequence[MetricsRecord]) -> pd.DataFrame:
    return pd.DataFrame([record.model_dump() for record in records], columns=METRICS_COLUMNS)


def write_metrics(metrics: pd.DataFrame, path: PathLike) -> None:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    metrics.to_csv(path, index=False)


def _check_views(views: Sequence[View]) -> List[View]:
    if not views:
        raise InvalidParameterError("views", "at least one posed image is required")
    checked = []
    for cam, image in views:
        cam.validate(tol=1e-6)
        image = np.asarray(image, dtype=np.float64)
        if image.shape != (cam.height, cam.width, 3):
            raise DimensionMismatchError(
                f"image for camera {cam.id}", f"expected {(cam.height, cam.width, 3)}, got {image.shape}"
            )
        checked.append((cam, image))
    return checked


def _snapshot(cloud: GaussianCloud, out_dir: Optional[PathLike], iteration: int) -> Optional[str]:
    if out_dir is None:
        return None
    path = os.path.join(os.fspath(out_dir), f"diverged_{iteration}.ply")
    save_ply(cloud, path)
    return path


def fit(
    views: Sequence[View],
    cfg: Optional[TrainConfig] = None,
    cloud: Optional[GaussianCloud] = None,
    bounds: Optional[SceneBounds] = None,
    out_dir: Optional[PathLike] = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
    threads: Optional[int] = None,
    telemetry: Optional[TrainingTelemetry] = None,
    perceptual: PerceptualHook = no_perceptual_loss,
) -> FitResult:
    """Optimize a Gaussian cloud against posed images.

    Each iteration renders every view (one random view when there are more than
    ``max_views_per_iter``), evaluates the total loss, back-propagates it through the
    rasterizer, applies the AdamW update, renormalizes quaternions, clips colors to
    [0, 1] and, on schedule, runs GDS-gated densification.

    Args:
        views: (camera, H×W×3 image) pairs.
        cfg (TrainConfig, optional): Optimization settings.
        cloud (GaussianCloud, optional): Starting cloud; ``init_cloud`` otherwise.
        bounds (SceneBounds, optional): Initialization box; its diagonal is the scene
            extent that scales the position learning rate and the split criterion.
        out_dir (PathLike, optional): Where checkpoints and divergence snapshots go.
        settings (RasterSettings): Rasterizer constants.
        threads (int, optional): Rasterizer worker threads.
        telemetry (TrainingTelemetry, optional): Prometheus collectors to update.
        perceptual: Perceptual loss hook.

    Returns:
        FitResult: Final cloud, metrics table and the final training state.

    Raises:
        TrainingDivergedError: If the loss becomes non-finite; a snapshot of the cloud is
            written to ``out_dir`` first.
    """
    cfg = cfg or TrainConfig()
    views = _check_views(views)
    rng = make_rng(cfg.seed)
    if cloud is None:
        cloud = init_cloud(cfg.n_init, bounds, cfg.seed)
        extent = (bounds or SceneBounds()).diagonal
    else:
        cloud = cloud.copy()
        extent = bounds.diagonal if bounds is not None else scene_extent(cloud) or 1.0
    optimizer = AdamW(cloud, cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay)
    state = TrainState(cloud=cloud, optimizer=optimizer, rng=rng, extent=extent)
    records: List[MetricsRecord] = []
    logger.info("Fitting %d Gaussians to %d views for %d iterations", len(cloud), len(views), cfg.iters)

    for iteration in range(1, cfg.iters + 1):
        state.iteration = iteration
        started = time.perf_counter()
        if len(views) <= cfg.max_views_per_iter:
            batch = views
        else:
            batch = [views[int(rng.integers(len(views)))]]

        renders = [render(cloud, cam, settings, threads).color for cam, _ in batch]
        targets = [image for _, image in batch]
        loss = total_loss(renders, targets, cfg.loss, perceptual)
        if not np.isfinite(loss.total):
            snapshot = _snapshot(cloud, out_dir, iteration)
            logger.error("Non-finite loss at iteration %d", iteration)
            raise TrainingDivergedError(iteration, snapshot)

        grads = CloudGradients.zeros(len(cloud))
        for (cam, _), grad_image in zip(batch, loss.grads):
            view_grads = render_backward(cloud, cam, grad_image, settings, threads)
            grads.add_(view_grads)
            visible = view_grads.visible
            cloud.grad_accum[visible, 0] += view_grads.mean2d_norm[visible]
            cloud.grad_accum[visible, 1] += 1.0

        optimizer.step(cloud, grads.params(), learning_rates(iteration, cfg, extent))
        cloud.normalize_quats()
        cloud.color = np.clip(cloud.color, 0.0, 1.0)

        record = MetricsRecord(
            iter=iteration,
            loss=loss.total,
            psnr=float(np.mean([psnr(r, t) for r, t in zip(renders, targets)])),
            n_gauss=len(cloud),
        )
        if densify_due(iteration, cfg):
            report = densify_and_prune(cloud, cfg.gds, rng, extent)
            optimizer.remap(report.origin)
            record.n_split = report.n_split
            record.n_clone = report.n_clone
            record.n_prune = report.n_prune
            record.n_gds_blocked = report.n_gds_blocked
            record.n_gauss = len(cloud)
            logger.info(
                "Iteration %d densify: %d split, %d clone, %d prune, %d GDS-blocked, %d Gaussians",
                iteration,
                report.n_split,
                report.n_clone,
                report.n_prune,
                report.n_gds_blocked,
                len(cloud),
            )
            if telemetry is not None:
                telemetry.observe_densify(**report.as_dict())
        if cfg.record_timing:
            record.ms_elapsed = (time.perf_counter() - started) * 1000.0
        records.append(record)
        if telemetry is not None:
            telemetry.observe_iteration(record.loss, record.psnr, record.n_gauss)

        if iteration % cfg.log_interval == 0 or iteration == cfg.iters:
            logger.info(
                "Iteration %d: loss %.6f, PSNR %.2f dB, %d Gaussians",
                iteration,
                record.loss,
                record.psnr,
                record.n_gauss,
            )
        if out_dir is not None and cfg.checkpoint_interval and iteration % cfg.checkpoint_interval == 0:
            save_ply(cloud, os.path.join(os.fspath(out_dir), f"ckpt_{iteration}.ply"))

    return FitResult(cloud=cloud, metrics=metrics_frame(records), state=state, records=records)
