from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple

import numpy as np
from scipy.special import expit

from app.config import get_num_threads
from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.gaussians import Camera
from app.modules.gaussians import Gaussian3D
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import build_covariances
from app.modules.gaussians import normalize_quat
from app.modules.gaussians import quat_to_rotmat
from app.modules.gaussians import rotmat_quat_jacobian
from app.schemas.config_schema import RasterSettings

logger = logging.getLogger(__name__)

DEFAULT_SETTINGS = RasterSettings()


@dataclass
class Splat2D:
    """The screen-space footprint of one Gaussian.

    Attributes:
        mean2d (np.ndarray): Pixel coordinates of the projected mean.
        cov2d (np.ndarray): 2×2 screen-space covariance, low-pass floor included.
        depth (float): Camera-space z.
        color (np.ndarray): RGB.
        opacity (float): Activated opacity.
        source_id (int): Index of the Gaussian in its cloud.
    """

    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float
    source_id: int = 0

    def weight_at(self, x: float, y: float) -> float:
        """Gaussian falloff exp(-½ dᵀ cov2d⁻¹ d) at pixel position (x, y)."""
        d = np.array([x, y], dtype=np.float64) - self.mean2d
        return float(np.exp(-0.5 * d @ np.linalg.solve(self.cov2d, d)))


@dataclass
class RenderBuffer:
    """Per-pixel output of the rasterizer.

    Attributes:
        color (np.ndarray): (H, W, 3) blended color over a black background.
        alpha (np.ndarray): (H, W) accumulated opacity, 1 - final transmittance.
        contrib_count (np.ndarray): (H, W) number of splats blended into each pixel.
        n_skipped (int): Splats skipped because their 2D covariance was singular.
    """

    color: np.ndarray
    alpha: np.ndarray
    contrib_count: np.ndarray
    n_skipped: int = 0


@dataclass
class CloudGradients:
    """Gradients of a scalar loss with respect to every Gaussian parameter.

    Attributes:
        mu, quat, log_scale, logit_opacity, color (np.ndarray): Parameter gradients,
            shaped like the matching GaussianCloud arrays.
        mean2d_norm (np.ndarray): (N,) NDC-scaled screen-space positional gradient norm.
        visible (np.ndarray): (N,) whether the Gaussian touched the image.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    color: np.ndarray
    mean2d_norm: np.ndarray
    visible: np.ndarray

    @classmethod
    def zeros(cls, n: int) -> "CloudGradients":
        return cls(
            mu=np.zeros((n, 3)),
            quat=np.zeros((n, 4)),
            log_scale=np.zeros((n, 3)),
            logit_opacity=np.zeros(n),
            color=np.zeros((n, 3)),
            mean2d_norm=np.zeros(n),
            visible=np.zeros(n, dtype=bool),
        )

    def params(self):
        return {
            "mu": self.mu,
            "quat": self.quat,
            "log_scale": self.log_scale,
            "logit_opacity": self.logit_opacity,
            "color": self.color,
        }

    def add_(self, other: "CloudGradients") -> "CloudGradients":
        """Accumulate parameter gradients of another view in place."""
        self.mu += other.mu
        self.quat += other.quat
        self.log_scale += other.log_scale
        self.logit_opacity += other.logit_opacity
        self.color += other.color
        return self


@dataclass
class ProjectedCloud:
    """Depth-culled, depth-sorted splats of a cloud in one camera.

    Rows are sorted by (depth, id). ``cov2d`` holds (a, b, c) of [[a, b], [b, c]];
    ``conic`` holds the matching entries of its inverse; ``box`` holds inclusive pixel bounds
    (x0, x1, y0, y1) clipped to the image.
    """

    source_id: np.ndarray
    t: np.ndarray
    cov3d: np.ndarray
    t2: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    box: np.ndarray
    singular: np.ndarray
    drawable: np.ndarray

    def __len__(self) -> int:
        return self.source_id.shape[0]

    def take(self, mask: np.ndarray) -> "ProjectedCloud":
        return ProjectedCloud(**{k: v[mask] for k, v in self.__dict__.items()})


def _check_camera(cam: Camera) -> None:
    if cam.width <= 0 or cam.height <= 0:
        raise InvalidParameterError(f"camera {cam.id}", "zero resolution")


def projection_jacobian(t: np.ndarray, cam: Camera) -> np.ndarray:
    """Perspective Jacobian rows (fx/z, 0, -fx·x/z²) and (0, fy/z, -fy·y/z²), shape (N, 2, 3)."""
    tx, ty, tz = t[:, 0], t[:, 1], t[:, 2]
    zero = np.zeros_like(tz)
    return np.stack(
        [
            np.stack([cam.fx / tz, zero, -cam.fx * tx / tz**2], axis=-1),
            np.stack([zero, cam.fy / tz, -cam.fy * ty / tz**2], axis=-1),
        ],
        axis=-2,
    )


def project_cloud(
    cloud: GaussianCloud,
    cam: Camera,
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> ProjectedCloud:
    """Project every Gaussian of a cloud into a camera.

    Gaussians with camera-space depth outside (near, far) are dropped. The rest are sorted
    by (depth, id) and get a 2D covariance J·W·Σ·Wᵀ·Jᵀ plus the low-pass floor, its
    inverse, and an image-clipped bounding box.

    Args:
        cloud (GaussianCloud): The cloud to project.
        cam (Camera): The camera.
        settings (RasterSettings): Rasterizer constants.

    Returns:
        ProjectedCloud: The projected splats, including off-screen ones (``drawable`` False).
    """
    t = cloud.mu @ cam.rot.T + cam.trans
    keep = np.flatnonzero((t[:, 2] > cam.near) & (t[:, 2] < cam.far))
    t = t[keep]
    order = np.lexsort((cloud.ids[keep], t[:, 2]))
    keep, t = keep[order], t[order]

    cov3d = build_covariances(cloud.quat[keep], cloud.log_scale[keep])
    t2 = projection_jacobian(t, cam) @ cam.rot
    cov = t2 @ cov3d @ np.swapaxes(t2, -1, -2)
    a = cov[:, 0, 0] + settings.low_pass
    b = 0.5 * (cov[:, 0, 1] + cov[:, 1, 0])
    c = cov[:, 1, 1] + settings.low_pass
    det = a * c - b * b
    safe_det = np.where(det >= settings.min_det, det, 1.0)
    conic = np.stack([c / safe_det, -b / safe_det, a / safe_det], axis=1)

    mean2d = np.stack(
        [cam.fx * t[:, 0] / t[:, 2] + cam.cx, cam.fy * t[:, 1] / t[:, 2] + cam.cy], axis=1
    )
    opacity = expit(cloud.logit_opacity[keep])

    # Half-size in standard deviations: at least min_extent_sigma, and wide enough that
    # everything outside the box has alpha below alpha_cutoff.
    with np.errstate(divide="ignore"):
        extent = np.sqrt(np.maximum(2.0 * np.log(opacity / settings.alpha_cutoff), 0.0))
    extent = np.maximum(extent, settings.min_extent_sigma)
    mid = 0.5 * (a + c)
    lambda_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = extent * np.sqrt(np.maximum(lambda_max, 0.0))
    box = np.stack(
        [
            np.ceil(mean2d[:, 0] - radius),
            np.floor(mean2d[:, 0] + radius),
            np.ceil(mean2d[:, 1] - radius),
            np.floor(mean2d[:, 1] + radius),
        ],
        axis=1,
    )
    box[:, 0:2] = np.clip(box[:, 0:2], 0, cam.width - 1)
    box[:, 2:4] = np.clip(box[:, 2:4], 0, cam.height - 1)
    box = box.astype(np.int64)
    on_screen = (
        (mean2d[:, 0] + radius >= 0)
        & (mean2d[:, 0] - radius <= cam.width - 1)
        & (mean2d[:, 1] + radius >= 0)
        & (mean2d[:, 1] - radius <= cam.height - 1)
    )

    return ProjectedCloud(
        source_id=keep,
        t=t,
        cov3d=cov3d,
        t2=t2,
        mean2d=mean2d,
        cov2d=np.stack([a, b, c], axis=1),
        conic=conic,
        depth=t[:, 2],
        color=cloud.color[keep],
        opacity=opacity,
        box=box,
        singular=det < settings.min_det,
        drawable=on_screen & (det >= settings.min_det),
    )


def project(
    g: Gaussian3D,
    cam: Camera,
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> Optional[Splat2D]:
    """Project a single Gaussian; returns None when its depth is outside (near, far)."""
    projected = project_cloud(GaussianCloud.from_gaussians([g]), cam, settings)
    if len(projected) == 0:
        return None
    a, b, c = projected.cov2d[0]
    return Splat2D(
        mean2d=projected.mean2d[0],
        cov2d=np.array([[a, b], [b, c]]),
        depth=float(projected.depth[0]),
        color=projected.color[0],
        opacity=float(projected.opacity[0]),
        source_id=0,
    )


def blend_pixel(
    splats: Sequence[Tuple[float, float, Sequence[float]]],
    settings: RasterSettings = DEFAULT_SETTINGS,
) -> np.ndarray:
    """Front-to-back alpha blending of depth-sorted splats at one pixel.

    Args:
        splats: (weight g, opacity σ, color c) triples sorted by ascending depth.
        settings (RasterSettings): Alpha clamp and early-stop threshold.

    Returns:
        np.ndarray: Ĉ = Σᵢ cᵢ·αᵢ·Πⱼ<ᵢ(1-αⱼ) with αᵢ = min(σᵢ·gᵢ, alpha_max).
    """
    out = np.zeros(3)
    transmittance = 1.0
    for weight, opacity, color in splats:
        if transmittance < settings.min_transmittance:
            break
        alpha = min(opacity * weight, settings.alpha_max)
        out += np.asarray(color, dtype=np.float64) * alpha * transmittance
        transmittance *= 1.0 - alpha
    return out


@dataclass
class _Block:
    """Intermediate per-pixel quantities of one block of image rows."""

    rows: slice
    splats: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    g: np.ndarray
    raw: np.ndarray
    alpha: np.ndarray
    transmittance: np.ndarray
    active: np.ndarray


def _rasterize_block(
    proj: ProjectedCloud,
    r0: int,
    r1: int,
    width: int,
    settings: RasterSettings,
) -> _Block:
    box = proj.box
    splats = np.flatnonzero((box[:, 2] <= r1 - 1) & (box[:, 3] >= r0))
    xs = np.arange(width, dtype=np.float64)
    ys = np.arange(r0, r1, dtype=np.float64)
    n_pix = (r1 - r0) * width

    dx = xs[None, None, :] - proj.mean2d[splats, 0][:, None, None]
    dy = ys[None, :, None] - proj.mean2d[splats, 1][:, None, None]
    a00, a01, a11 = (proj.conic[splats, i][:, None, None] for i in range(3))
    q = a00 * dx * dx + 2.0 * a01 * dx * dy + a11 * dy * dy

    inside_x = (xs[None, :] >= box[splats, 0][:, None]) & (xs[None, :] <= box[splats, 1][:, None])
    inside_y = (ys[None, :] >= box[splats, 2][:, None]) & (ys[None, :] <= box[splats, 3][:, None])
    inside = inside_y[:, :, None] & inside_x[:, None, :]

    g = np.where(inside, np.exp(-0.5 * q), 0.0).reshape(len(splats), n_pix)
    raw = proj.opacity[splats][:, None] * g
    alpha = np.minimum(raw, settings.alpha_max)

    transmittance = np.ones_like(alpha)
    if len(splats) > 1:
        transmittance[1:] = np.cumprod(1.0 - alpha[:-1], axis=0)
    active = transmittance >= settings.min_transmittance
    return _Block(
        rows=slice(r0, r1),
        splats=splats,
        dx=dx,
        dy=dy,
        g=g,
        raw=raw,
        alpha=alpha,
        transmittance=transmittance,
        active=active,
    )


def _blocks(height: int, settings: RasterSettings) -> List[Tuple[int, int]]:
    step = settings.row_block
    return [(r0, min(r0 + step, height)) for r0 in range(0, height, step)]


def _run(fn: Callable, items: List, threads: Optional[int]) -> List:
    """Map fn over items, in parallel when allowed; results keep the input order."""
    threads = threads or get_num_threads()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def render(
    cloud: GaussianCloud,
    cam: Camera,
    settings: RasterSettings = DEFAULT_SETTINGS,
    threads: Optional[int] = None,
) -> RenderBuffer:
    """Render a cloud from a camera.

    Splats are globally sorted by (depth, id), each is evaluated inside its bounding
    box, and pixels blend front to back over a black background. Work is split into fixed
    blocks of image rows, so the result does not depend on the thread count.

    Args:
        cloud (GaussianCloud): The cloud to render; it is not modified.
        cam (Camera): The camera.
        settings (RasterSettings): Rasterizer constants.
        threads (int, optional): Worker threads; defaults to FDG_THREADS.

    Returns:
        RenderBuffer: Color, alpha and contribution counts.

    Raises:
        InvalidParameterError: If the camera has zero resolution.
    """
    _check_camera(cam)
    height, width = cam.height, cam.width
    proj = project_cloud(cloud, cam, settings)
    n_skipped = int(np.sum(proj.singular))
    if n_skipped:
        logger.debug("Skipped %d splats with singular 2D covariance", n_skipped)
    proj = proj.take(proj.drawable)

    def forward(rows: Tuple[int, int]):
        r0, r1 = rows
        block = _rasterize_block(proj, r0, r1, width, settings)
        weights = block.alpha * block.transmittance * block.active
        color = weights.T @ proj.color[block.splats]
        after = np.where(block.active, block.transmittance * (1.0 - block.alpha), 1.0)
        final_t = after.min(axis=0) if len(block.splats) else np.ones((r1 - r0) * width)
        count = np.sum(block.active & (block.alpha > 0.0), axis=0)
        return color, 1.0 - final_t, count

    color = np.zeros((height, width, 3))
    alpha = np.zeros((height, width))
    count = np.zeros((height, width), dtype=np.int64)
    blocks = _blocks(height, settings)
    for (r0, r1), (c, a, n) in zip(blocks, _run(forward, blocks, threads)):
        color[r0:r1] = c.reshape(r1 - r0, width, 3)
        alpha[r0:r1] = a.reshape(r1 - r0, width)
        count[r0:r1] = n.reshape(r1 - r0, width)
    return RenderBuffer(color=color, alpha=alpha, contrib_count=count, n_skipped=n_skipped)


def render_backward(
    cloud: GaussianCloud,
    cam: Camera,
    grad_image: np.ndarray,
    settings: RasterSettings = DEFAULT_SETTINGS,
    threads: Optional[int] = None,
) -> CloudGradients:
    """Back-propagate an image gradient to every Gaussian parameter.

    The chain runs through front-to-back blending, the 2D Gaussian falloff, the inverse of
    the 2D covariance, the projection Jacobian and the covariance assembly. Per-block
    partial sums are reduced in block order, so results do not depend on the thread count.

    Args:
        cloud (GaussianCloud): The cloud that was rendered.
        cam (Camera): The camera it was rendered from.
        grad_image (np.ndarray): (H, W, 3) gradient of the loss w.r.t. the rendered color.
        settings (RasterSettings): Rasterizer constants.
        threads (int, optional): Worker threads; defaults to FDG_THREADS.

    Returns:
        CloudGradients: Gradients for every Gaussian (zero for culled ones) and the
        screen-space positional gradient norms used for densification statistics.

    Raises:
        DimensionMismatchError: If grad_image does not match the camera resolution.
        InvalidParameterError: If grad_image is not finite.
    """
    _check_camera(cam)
    height, width = cam.height, cam.width
    grad_image = np.asarray(grad_image, dtype=np.float64)
    if grad_image.shape != (height, width, 3):
        raise DimensionMismatchError(
            "grad_image", f"expected {(height, width, 3)}, got {grad_image.shape}"
        )
    if not np.all(np.isfinite(grad_image)):
        raise InvalidParameterError("grad_image", "non-finite entries")

    grads = CloudGradients.zeros(len(cloud))
    proj = project_cloud(cloud, cam, settings)
    proj = proj.take(proj.drawable)
    n_splats = len(proj)
    if n_splats == 0:
        return grads

    def backward(rows: Tuple[int, int]):
        r0, r1 = rows
        block = _rasterize_block(proj, r0, r1, width, settings)
        k = len(block.splats)
        partial = np.zeros((k, 9))
        if k == 0:
            return block.splats, partial
        grad = grad_image[r0:r1].reshape(-1, 3)
        colors = proj.color[block.splats]
        weights = block.alpha * block.transmittance * block.active

        gc = colors @ grad.T
        contribution = weights * gc
        after = np.cumsum(contribution[::-1], axis=0)[::-1] - contribution
        d_alpha = block.active * (block.transmittance * gc - after / (1.0 - block.alpha))
        d_raw = np.where(block.raw < settings.alpha_max, d_alpha, 0.0)

        opacity = proj.opacity[block.splats]
        d_q = (-0.5 * block.g * d_raw * opacity[:, None]).reshape(k, r1 - r0, width)
        a00, a01, a11 = (proj.conic[block.splats, i][:, None, None] for i in range(3))
        dx, dy = block.dx, block.dy

        partial[:, 0] = np.sum(d_q * -(2.0 * a00 * dx + 2.0 * a01 * dy), axis=(1, 2))
        partial[:, 1] = np.sum(d_q * -(2.0 * a01 * dx + 2.0 * a11 * dy), axis=(1, 2))
        partial[:, 2] = np.sum(d_q * dx * dx, axis=(1, 2))
        partial[:, 3] = np.sum(d_q * 2.0 * dx * dy, axis=(1, 2))
        partial[:, 4] = np.sum(d_q * dy * dy, axis=(1, 2))
        partial[:, 5] = np.sum(d_raw * block.g, axis=1)
        partial[:, 6:9] = weights @ grad
        return block.splats, partial

    totals = np.zeros((n_splats, 9))
    for splats, partial in _run(backward, _blocks(height, settings), threads):
        totals[splats] += partial

    d_mean = totals[:, 0:2]
    d_conic = totals[:, 2:5]
    d_opacity = totals[:, 5]
    d_color = totals[:, 6:9]

    # Conic -> 2D covariance: dL/dΣ' = -A·G·A for symmetric gradients.
    a00, a01, a11 = proj.conic[:, 0], proj.conic[:, 1], proj.conic[:, 2]
    conic = np.stack([np.stack([a00, a01], -1), np.stack([a01, a11], -1)], -2)
    g_conic = np.stack(
        [
            np.stack([d_conic[:, 0], 0.5 * d_conic[:, 1]], -1),
            np.stack([0.5 * d_conic[:, 1], d_conic[:, 2]], -1),
        ],
        -2,
    )
    g_cov2 = -conic @ g_conic @ conic

    # 2D covariance -> 3D covariance and the combined projection T = J·W.
    t2 = proj.t2
    g_cov3 = np.swapaxes(t2, -1, -2) @ g_cov2 @ t2
    g_t2 = 2.0 * g_cov2 @ t2 @ proj.cov3d
    g_jac = g_t2 @ cam.rot.T

    tx, ty, tz = proj.t[:, 0], proj.t[:, 1], proj.t[:, 2]
    fx, fy = cam.fx, cam.fy
    g_t = np.zeros_like(proj.t)
    g_t[:, 0] = g_jac[:, 0, 2] * (-fx / tz**2) + d_mean[:, 0] * fx / tz
    g_t[:, 1] = g_jac[:, 1, 2] * (-fy / tz**2) + d_mean[:, 1] * fy / tz
    g_t[:, 2] = (
        g_jac[:, 0, 0] * (-fx / tz**2)
        + g_jac[:, 0, 2] * (2.0 * fx * tx / tz**3)
        + g_jac[:, 1, 1] * (-fy / tz**2)
        + g_jac[:, 1, 2] * (2.0 * fy * ty / tz**3)
        - d_mean[:, 0] * fx * tx / tz**2
        - d_mean[:, 1] * fy * ty / tz**2
    )
    g_mu = g_t @ cam.rot

    # 3D covariance -> rotation and scales (Σ = M·Mᵀ, M = R·S).
    ids = proj.source_id
    quat = cloud.quat[ids]
    q_norm = np.linalg.norm(quat, axis=1, keepdims=True)
    q_hat = normalize_quat(quat)
    rot = quat_to_rotmat(q_hat)
    scale = np.exp(cloud.log_scale[ids])
    m = rot * scale[:, None, :]
    g_m = 2.0 * g_cov3 @ m
    g_rot = g_m * scale[:, None, :]
    g_scale = np.sum(g_m * rot, axis=1)
    g_q_hat = np.einsum("pkij,pij->pk", rotmat_quat_jacobian(q_hat), g_rot)
    g_quat = (g_q_hat - q_hat * np.sum(q_hat * g_q_hat, axis=1, keepdims=True)) / q_norm

    grads.mu[ids] = g_mu
    grads.quat[ids] = g_quat
    grads.log_scale[ids] = g_scale * scale
    grads.logit_opacity[ids] = d_opacity * proj.opacity * (1.0 - proj.opacity)
    grads.color[ids] = d_color
    grads.mean2d_norm[ids] = np.hypot(d_mean[:, 0] * 0.5 * width, d_mean[:, 1] * 0.5 * height)
    grads.visible[ids] = True
    return grads
