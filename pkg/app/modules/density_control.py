from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import field
from typing import Optional
from typing import Union

import numpy as np
from scipy.spatial import cKDTree

from app.exception_handlers import DegenerateGeometryError
from app.modules.gaussians import Gaussian3D
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import build_covariances
from app.modules.gaussians import covariance_trace
from app.modules.gaussians import inv_spd
from app.modules.gaussians import normalize_quat
from app.modules.gaussians import quat_to_rotmat
from app.modules.gaussians import sqrt_spd
from app.schemas.config_schema import GdsConfig
from app.schemas.config_schema import GdsForm
from app.schemas.metrics_schema import GdsSummary

logger = logging.getLogger(__name__)


def gds_batch(
    mu1: np.ndarray,
    log_scale1: np.ndarray,
    cov1: np.ndarray,
    mu2: np.ndarray,
    log_scale2: np.ndarray,
    cov2: np.ndarray,
    form: Union[GdsForm, str] = GdsForm.WASSERSTEIN,
) -> np.ndarray:
    """Gaussian Divergent Significance for aligned stacks of Gaussian pairs.

    ‖μ₁-μ₂‖² + tr(Σ₁) + tr(Σ₂) - 2·tr(M^{1/2}), where M = Σ₁^{1/2}Σ₂Σ₁^{1/2}
    (``wasserstein``) or M = Σ₁⁻¹Σ₂Σ₁⁻¹ (``literal``). The traces of Σ₁ and Σ₂ come straight
    from the log-scales.
    """
    form = GdsForm(form)
    if form is GdsForm.WASSERSTEIN:
        left = sqrt_spd(cov1)
    else:
        left = inv_spd(cov1)
    m = left @ cov2 @ left
    m = 0.5 * (m + np.swapaxes(m, -1, -2))
    # tr(M^{1/2}) is the sum of the roots of M's eigenvalues; roundoff negatives clip to 0.
    cross = np.sum(np.sqrt(np.clip(np.linalg.eigvalsh(m), 0.0, None)), axis=-1)
    value = (
        np.sum((mu1 - mu2) ** 2, axis=-1)
        + covariance_trace(log_scale1)
        + covariance_trace(log_scale2)
        - 2.0 * cross
    )
    if form is GdsForm.WASSERSTEIN:
        value = np.maximum(value, 0.0)
    return value


def gds(
    g1: Gaussian3D,
    g2: Gaussian3D,
    form: Union[GdsForm, str] = GdsForm.WASSERSTEIN,
) -> float:
    """GDS distance between two Gaussians.

    Args:
        g1 (Gaussian3D): First Gaussian.
        g2 (Gaussian3D): Second Gaussian.
        form (GdsForm): ``wasserstein`` (default, zero for identical Gaussians) or
            ``literal``.

    Returns:
        float: The GDS value.

    Raises:
        DegenerateGeometryError: If Σ₁ is singular under the literal form.
    """
    cov = build_covariances(np.stack([g1.quat, g2.quat]), np.stack([g1.log_scale, g2.log_scale]))
    value = gds_batch(
        g1.mu[None], g1.log_scale[None], cov[:1], g2.mu[None], g2.log_scale[None], cov[1:], form
    )
    return float(value[0])


class SpatialIndex:
    """Exact nearest-neighbour index over Gaussian positions.

    Backed by a k-d tree; ties between equidistant neighbours are broken by the smallest
    Gaussian id, and distances are compared exactly as ‖μᵢ - μⱼ‖².
    """

    def __init__(self, positions: np.ndarray, ids: Optional[np.ndarray] = None):
        self.positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
        n = self.positions.shape[0]
        self.ids = np.arange(n) if ids is None else np.asarray(ids, dtype=np.int64)
        self.tree = cKDTree(self.positions) if n else None

    @classmethod
    def from_cloud(cls, cloud: GaussianCloud) -> "SpatialIndex":
        return cls(cloud.mu, cloud.ids)

    def __len__(self) -> int:
        return self.positions.shape[0]

    def nearest(self, indices: Optional[np.ndarray] = None) -> np.ndarray:
        """Index of the exact nearest other point for each requested point.

        Args:
            indices (np.ndarray, optional): Points to query; all points by default.

        Returns:
            np.ndarray: Neighbour indices (into the indexed positions).

        Raises:
            DegenerateGeometryError: With fewer than two indexed points.
        """
        n = len(self)
        if n < 2:
            raise DegenerateGeometryError("cloud", "nearest neighbour needs at least 2 Gaussians")
        indices = np.arange(n) if indices is None else np.asarray(indices, dtype=np.int64)
        query = self.positions[indices]
        dist, idx = self.tree.query(query, k=2)
        # The first neighbour that is not the point itself bounds the true distance.
        bound = np.where(idx[:, 0] == indices, dist[:, 1], dist[:, 0])
        radius = bound * (1.0 + 1e-9) + 1e-12
        candidates = self.tree.query_ball_point(query, radius)

        result = np.empty(len(indices), dtype=np.int64)
        for row, (i, cands) in enumerate(zip(indices, candidates)):
            cands = np.asarray([c for c in cands if c != i], dtype=np.int64)
            d2 = np.sum((self.positions[cands] - self.positions[i]) ** 2, axis=1)
            best = cands[d2 == d2.min()]
            result[row] = best[np.argmin(self.ids[best])]
        return result


def nearest_gds(
    cloud: GaussianCloud,
    index: SpatialIndex,
    i: Optional[Union[int, np.ndarray]] = None,
    form: Union[GdsForm, str] = GdsForm.WASSERSTEIN,
    relative: bool = False,
) -> Union[float, np.ndarray]:
    """GDS between Gaussian(s) ``i`` and their exact nearest neighbours.

    With ``relative`` set, each value is divided by tr(Σᵢ) + tr(Σⱼ) of the pair, which makes
    it independent of the scene scale: 0.1 then marks neighbours whose centres are closer
    than roughly three quarters of their standard deviation.

    Args:
        cloud (GaussianCloud): The cloud, with at least two Gaussians.
        index (SpatialIndex): Index built over the cloud positions.
        i (int or np.ndarray, optional): A Gaussian index, an array of indices, or None
            for all Gaussians.
        form (GdsForm): GDS variant.
        relative (bool): Divide by the summed covariance traces of each pair.

    Returns:
        float for a scalar index, otherwise an array of GDS values.

    Raises:
        DegenerateGeometryError: For a singleton cloud.
    """
    if len(cloud) < 2:
        raise DegenerateGeometryError("cloud", "nearest_gds needs at least 2 Gaussians")
    scalar = np.isscalar(i)
    indices = np.arange(len(cloud)) if i is None else np.atleast_1d(np.asarray(i, dtype=np.int64))
    if len(indices) == 0:
        return np.zeros(0)
    neighbours = index.nearest(indices)
    cov = build_covariances(cloud.quat, cloud.log_scale)
    values = gds_batch(
        cloud.mu[indices],
        cloud.log_scale[indices],
        cov[indices],
        cloud.mu[neighbours],
        cloud.log_scale[neighbours],
        cov[neighbours],
        form,
    )
    if relative:
        values = values / (
            covariance_trace(cloud.log_scale[indices]) + covariance_trace(cloud.log_scale[neighbours])
        )
    return float(values[0]) if scalar else values


@dataclass
class DensifyReport:
    """Outcome of one densification event.

    Attributes:
        n_split, n_clone, n_prune, n_gds_blocked (int): Operation counts.
        origin (np.ndarray): For every Gaussian of the new cloud, its row in the old cloud,
            or -1 for newly created ones.
    """

    n_split: int = 0
    n_clone: int = 0
    n_prune: int = 0
    n_gds_blocked: int = 0
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def as_dict(self) -> dict:
        return {
            "n_split": self.n_split,
            "n_clone": self.n_clone,
            "n_prune": self.n_prune,
            "n_gds_blocked": self.n_gds_blocked,
        }


def scene_extent(cloud: GaussianCloud) -> float:
    """Diagonal of the bounding box of the Gaussian positions."""
    if len(cloud) == 0:
        return 0.0
    return float(np.linalg.norm(cloud.mu.max(axis=0) - cloud.mu.min(axis=0)))


def densify_and_prune(
    cloud: GaussianCloud,
    cfg: GdsConfig,
    rng: np.random.Generator,
    extent: Optional[float] = None,
    stats: Optional[np.ndarray] = None,
) -> DensifyReport:
    """Split, clone and prune Gaussians in place, gated by nearest-neighbour GDS.

    A Gaussian is a densification candidate when its mean accumulated screen-space
    gradient exceeds ``cfg.grad_threshold``. Candidates whose nearest-neighbour GDS (scale-relative
    when ``cfg.relative`` is set) is not above ``cfg.threshold`` are left untouched and counted
    as blocked. The rest are split
    into two children sampled from the parent (scales divided by ``split_factor``) when
    their largest scale exceeds ``percent_dense`` of the scene extent, and cloned otherwise.
    Finally, Gaussians with opacity below ``prune_opacity`` are removed and the gradient
    statistics are reset.

    Args:
        cloud (GaussianCloud): The cloud; mutated in place (single writer).
        cfg (GdsConfig): Density control settings.
        rng (np.random.Generator): Source of the split samples.
        extent (float, optional): Scene bounding-box diagonal; derived from the cloud if
            omitted.
        stats (np.ndarray, optional): (N, 2) gradient statistics; defaults to
            ``cloud.grad_accum``.

    Returns:
        DensifyReport: Operation counts and the old-row origin of every new row.
    """
    n = len(cloud)
    stats = cloud.grad_accum if stats is None else np.asarray(stats, dtype=np.float64)
    extent = scene_extent(cloud) if extent is None else float(extent)
    report = DensifyReport()

    with np.errstate(invalid="ignore", divide="ignore"):
        mean_grad = np.where(stats[:, 1] > 0, stats[:, 0] / stats[:, 1], 0.0)
    candidates = np.flatnonzero(mean_grad > cfg.grad_threshold)

    selected = candidates
    if len(candidates) and cfg.threshold > 0.0 and n >= 2:
        values = nearest_gds(
            cloud, SpatialIndex.from_cloud(cloud), candidates, cfg.form, relative=cfg.relative
        )
        passed = values > cfg.threshold
        report.n_gds_blocked = int(np.sum(~passed))
        selected = candidates[passed]

    big = np.zeros(len(selected), dtype=bool)
    if len(selected):
        big = np.max(cloud.scale[selected], axis=1) > cfg.percent_dense * extent
    to_split = selected[big]
    to_clone = selected[~big]
    report.n_split = len(to_split)
    report.n_clone = len(to_clone)

    source = cloud.copy()
    origin = np.arange(n)
    if len(to_clone):
        cloud.append(
            source.mu[to_clone],
            source.quat[to_clone],
            source.log_scale[to_clone],
            source.logit_opacity[to_clone],
            source.color[to_clone],
        )
        origin = np.concatenate([origin, np.full(len(to_clone), -1)])
    if len(to_split):
        parents = np.repeat(to_split, 2)
        rot = quat_to_rotmat(normalize_quat(source.quat[parents]))
        samples = rng.normal(size=(len(parents), 3)) * source.scale[parents]
        children_mu = source.mu[parents] + np.einsum("nij,nj->ni", rot, samples)
        cloud.append(
            children_mu,
            source.quat[parents],
            source.log_scale[parents] - np.log(cfg.split_factor),
            source.logit_opacity[parents],
            source.color[parents],
        )
        origin = np.concatenate([origin, np.full(len(parents), -1)])

    keep = np.ones(len(cloud), dtype=bool)
    keep[to_split] = False
    removed_parents = int(np.sum(~keep))
    keep &= cloud.opacity >= cfg.prune_opacity
    report.n_prune = int(np.sum(~keep)) - removed_parents

    survivors = np.flatnonzero(keep)
    pruned = cloud.take(survivors)
    cloud.mu, cloud.quat, cloud.log_scale = pruned.mu, pruned.quat, pruned.log_scale
    cloud.logit_opacity, cloud.color, cloud.ids = pruned.logit_opacity, pruned.color, pruned.ids
    cloud.reset_grad_stats()
    report.origin = origin[survivors]
    logger.debug(
        "Densify: %d split, %d clone, %d prune, %d GDS-blocked -> %d Gaussians",
        report.n_split,
        report.n_clone,
        report.n_prune,
        report.n_gds_blocked,
        len(cloud),
    )
    return report


def gds_summary(
    cloud: GaussianCloud,
    form: Union[GdsForm, str] = GdsForm.WASSERSTEIN,
    bins: int = 10,
) -> GdsSummary:
    """Order statistics and histogram of every Gaussian's nearest-neighbour GDS.

    Raises:
        DegenerateGeometryError: For clouds with fewer than two Gaussians.
    """
    values = nearest_gds(cloud, SpatialIndex.from_cloud(cloud), None, form)
    counts, edges = np.histogram(values, bins=bins)
    return GdsSummary(
        count=len(values),
        minimum=float(np.min(values)),
        median=float(np.median(values)),
        maximum=float(np.max(values)),
        bin_edges=edges.tolist(),
        counts=counts.tolist(),
    )
