from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Tuple
from typing import Union

import numpy as np
from scipy.special import expit
from scipy.special import softmax

from app.exception_handlers import DegenerateGeometryError
from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.gaussians import Camera

logger = logging.getLogger(__name__)

BAND_SHARPNESS = 60.0
BAND_WIDTH = 0.06
MIN_DEPTH = 1e-6
MIN_DIRECTION = 1e-9
MIN_ROW_SUM = 1e-12

# Ray depths tried, in order, for the two points that span an epipolar line. Depth 0 is the
# target camera centre, whose projection is the epipole.
_LINE_DEPTHS = (0.0, 1.0, 2.0, 3.0)


@dataclass(frozen=True)
class RelativePose:
    """Rigid transform taking target-camera coordinates to source-camera coordinates.

    Attributes:
        rot_ts (np.ndarray): 3×3 rotation.
        trans_ts (np.ndarray): Translation.
    """

    rot_ts: np.ndarray
    trans_ts: np.ndarray

    def __post_init__(self):
        rot = np.asarray(self.rot_ts, dtype=np.float64).reshape(3, 3)
        trans = np.asarray(self.trans_ts, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(rot)) and np.all(np.isfinite(trans))):
            raise InvalidParameterError("pose", "non-finite entries")
        if not np.allclose(rot @ rot.T, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0.0:
            raise InvalidParameterError("pose", "rotation is not orthonormal with det +1")
        object.__setattr__(self, "rot_ts", rot)
        object.__setattr__(self, "trans_ts", trans)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rot_ts.T + self.trans_ts


def relative_pose(cam_t: Camera, cam_s: Camera) -> RelativePose:
    """Pose from the target camera frame to the source camera frame.

    R_ts = R_s·R_tᵀ and T_ts = T_s - R_ts·T_t for world-to-camera transforms.
    """
    rot_ts = cam_s.rot @ cam_t.rot.T
    return RelativePose(rot_ts=rot_ts, trans_ts=cam_s.trans - rot_ts @ cam_t.trans)


@dataclass
class FeatureMap:
    """Features on an h×w grid, stored as h·w rows of d-vectors in row-major cell order."""

    h: int
    w: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2 or self.data.shape[0] != self.h * self.w:
            raise DimensionMismatchError(
                "features", f"expected ({self.h * self.w}, d) rows, got {self.data.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise InvalidParameterError("features", "non-finite entries")

    @classmethod
    def from_grid(cls, grid: np.ndarray) -> "FeatureMap":
        grid = np.asarray(grid, dtype=np.float64)
        if grid.ndim != 3:
            raise DimensionMismatchError("features", f"expected h×w×d, got {grid.shape}")
        h, w, d = grid.shape
        return cls(h=h, w=w, data=grid.reshape(h * w, d))

    @property
    def d(self) -> int:
        return self.data.shape[1]

    def grid(self) -> np.ndarray:
        return self.data.reshape(self.h, self.w, self.d)


@dataclass
class EpipolarWeights:
    """Epipolar weight matrix; rows are source positions, columns target positions.

    Attributes:
        m (np.ndarray): (h·w, h·w) weights in [0, 1].
        uniform (bool): Set when a degenerate pose forced the all-ones fallback.
    """

    m: np.ndarray
    uniform: bool = False


@dataclass(frozen=True)
class EpipolarLine:
    """Parametric line o + c·(q - o) in normalized source image coordinates."""

    origin: np.ndarray
    point: np.ndarray

    @property
    def direction(self) -> np.ndarray:
        return self.point - self.origin


def cell_centers(h: int, w: int) -> np.ndarray:
    """Normalized (x, y) centres of an h×w grid in row-major order."""
    if h <= 0 or w <= 0:
        raise InvalidParameterError("grid", f"{h}x{w}")
    ys, xs = np.meshgrid((np.arange(h) + 0.5) / h, (np.arange(w) + 0.5) / w, indexing="ij")
    return np.stack([xs.ravel(), ys.ravel()], axis=1)


def _line_points(
    p_t: np.ndarray, pose: RelativePose, cam_t: Camera, cam_s: Camera
) -> Tuple[np.ndarray, np.ndarray]:
    """Two normalized source-view points spanning the epipolar line of each target point."""
    p_t = np.atleast_2d(np.asarray(p_t, dtype=np.float64))
    pixels = p_t * np.array([cam_t.width, cam_t.height], dtype=np.float64)
    homogeneous = np.concatenate([pixels, np.ones((len(pixels), 1))], axis=1)
    rays = np.linalg.solve(cam_t.intrinsics, homogeneous.T).T  # unit depth

    depths = np.asarray(_LINE_DEPTHS)
    points_t = depths[None, :, None] * rays[:, None, :]
    points_s = pose.apply(points_t)
    z = points_s[..., 2]
    valid = np.abs(z) > MIN_DEPTH
    if np.any(valid.sum(axis=1) < 2):
        raise DegenerateGeometryError("pose", "epipolar line lies at infinity in the source view")

    order = np.argsort(~valid, axis=1, kind="stable")[:, :2]
    rows = np.arange(len(p_t))[:, None]
    chosen = points_s[rows, order]
    projected = chosen @ cam_s.intrinsics.T
    size_s = np.array([cam_s.width, cam_s.height], dtype=np.float64)
    normalized = projected[..., :2] / projected[..., 2:3] / size_s
    return normalized[:, 0], normalized[:, 1]


def epipolar_line(
    p_t: np.ndarray, pose: RelativePose, cam_t: Camera, cam_s: Camera
) -> EpipolarLine:
    """Epipolar line in the source view of a normalized target-view point.

    The point is lifted to unit depth on its camera ray, moved into the source frame and
    projected; the target camera centre is projected the same way to give the line origin.
    When the centre lies in the source principal plane the ray point at depth 2 is used
    instead.

    Args:
        p_t (np.ndarray): (x, y) in [0, 1]² of the target view.
        pose (RelativePose): Target-to-source transform.
        cam_t (Camera): Target camera (intrinsics and size).
        cam_s (Camera): Source camera (intrinsics and size).

    Returns:
        EpipolarLine: Origin and second point in normalized source coordinates.

    Raises:
        DegenerateGeometryError: For a pure-rotation pose, where the line collapses to a
            point and uniform weights should be used instead.
    """
    origin, point = _line_points(p_t, pose, cam_t, cam_s)
    line = EpipolarLine(origin=origin[0], point=point[0])
    if np.linalg.norm(line.direction) < MIN_DIRECTION:
        raise DegenerateGeometryError(
            "pose", "degenerate epipolar line (pure rotation); fall back to uniform weights"
        )
    return line


def epipolar_distance(p_s: np.ndarray, line: EpipolarLine) -> Union[float, np.ndarray]:
    """Distance ‖(p_s - o) × (q - o)‖ / ‖q - o‖ of source point(s) to an epipolar line."""
    direction = line.direction
    length = np.linalg.norm(direction)
    if length < MIN_DIRECTION:
        raise DegenerateGeometryError("line", "degenerate epipolar line")
    offset = np.asarray(p_s, dtype=np.float64) - line.origin
    cross = offset[..., 0] * direction[1] - offset[..., 1] * direction[0]
    distance = np.abs(cross) / length
    return float(distance) if np.ndim(distance) == 0 else distance


def epipolar_weight(distance: Union[float, np.ndarray]) -> Union[float, np.ndarray]:
    """1 - sigmoid(60·(d - 0.06))."""
    weight = 1.0 - expit(BAND_SHARPNESS * (np.asarray(distance, dtype=np.float64) - BAND_WIDTH))
    return float(weight) if np.ndim(weight) == 0 else weight


def weight_map(
    p_t: np.ndarray,
    pose: RelativePose,
    cam_t: Camera,
    cam_s: Camera,
    h: int,
    w: int,
) -> np.ndarray:
    """Epipolar weights of every source grid cell for one target point.

    Returns:
        np.ndarray: (h, w) map with entries in [0, 1].
    """
    line = epipolar_line(p_t, pose, cam_t, cam_s)
    return epipolar_weight(epipolar_distance(cell_centers(h, w), line)).reshape(h, w)


def epipolar_weight_matrix(
    pose: RelativePose, cam_t: Camera, cam_s: Camera, h: int, w: int
) -> EpipolarWeights:
    """Stacked weight maps of all target cells: rows are source cells, columns target cells.

    A degenerate pose yields an all-ones matrix and a warning.
    """
    centers = cell_centers(h, w)
    n = len(centers)
    try:
        origins, points = _line_points(centers, pose, cam_t, cam_s)
    except DegenerateGeometryError:
        origins = points = None
    if origins is None or np.any(np.linalg.norm(points - origins, axis=1) < MIN_DIRECTION):
        logger.warning("Degenerate epipolar geometry; using uniform attention weights")
        return EpipolarWeights(m=np.ones((n, n)), uniform=True)

    direction = points - origins
    length = np.linalg.norm(direction, axis=1)
    # offsets[i, j] = source cell i relative to the origin of target cell j's line
    offsets = centers[:, None, :] - origins[None, :, :]
    cross = offsets[..., 0] * direction[None, :, 1] - offsets[..., 1] * direction[None, :, 0]
    distance = np.abs(cross) / length[None, :]
    return EpipolarWeights(m=epipolar_weight(distance))


def _as_matrix(weights: Union[EpipolarWeights, np.ndarray]) -> np.ndarray:
    m = weights.m if isinstance(weights, EpipolarWeights) else weights
    return np.asarray(m, dtype=np.float64)


def attention_probabilities(
    f_s: FeatureMap, f_t: FeatureMap, weights: Union[EpipolarWeights, np.ndarray]
) -> np.ndarray:
    """Row-softmax cross-attention of f_s over f_t, gated by the epipolar weights.

    Gated rows are renormalized; rows whose gated sum falls below 1e-12 keep the ungated
    probabilities.
    """
    if f_s.d != f_t.d:
        raise DimensionMismatchError("features", f"d={f_s.d} vs d={f_t.d}")
    m = _as_matrix(weights)
    if m.shape != (f_s.data.shape[0], f_t.data.shape[0]):
        raise DimensionMismatchError(
            "weights", f"expected {(f_s.data.shape[0], f_t.data.shape[0])}, got {m.shape}"
        )
    scores = f_s.data @ f_t.data.T / np.sqrt(f_s.d)
    probabilities = softmax(scores, axis=1)
    gated = probabilities * m
    sums = gated.sum(axis=1, keepdims=True)
    fallback = sums < MIN_ROW_SUM
    if np.any(fallback):
        logger.debug("%d attention rows fell back to ungated probabilities", int(fallback.sum()))
    return np.where(fallback, probabilities, gated / np.where(fallback, 1.0, sums))


def epipolar_attention(
    f_s: FeatureMap, f_t: FeatureMap, weights: Union[EpipolarWeights, np.ndarray]
) -> FeatureMap:
    """Epipolar-gated cross-view attention.

    Args:
        f_s (FeatureMap): Source (query) features.
        f_t (FeatureMap): Target (key and value) features with the same d.
        weights (EpipolarWeights): Gate of shape (source cells, target cells).

    Returns:
        FeatureMap: Attended features on the source grid.

    Raises:
        DimensionMismatchError: If feature dims or gate shape do not match.
    """
    probabilities = attention_probabilities(f_s, f_t, weights)
    return FeatureMap(h=f_s.h, w=f_s.w, data=probabilities @ f_t.data)
