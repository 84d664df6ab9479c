from __future__ import annotations

import logging
from dataclasses import dataclass
from dataclasses import field
from typing import Dict
from typing import Iterable
from typing import Iterator
from typing import Optional
from typing import Sequence

import numpy as np
from scipy.special import expit
from scipy.special import logit

from app.exception_handlers import DegenerateGeometryError
from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError

logger = logging.getLogger(__name__)

# Zeroth-order spherical harmonic basis constant, used for the PLY color layout.
SH_C0 = 0.28209479177387814

PARAM_GROUPS = ("mu", "quat", "log_scale", "logit_opacity", "color")

SYMMETRY_TOL = 1e-10
NEGATIVE_EIG_TOL = 1e-9


@dataclass
class Gaussian3D:
    """A single anisotropic 3D Gaussian.

    Attributes:
        mu (np.ndarray): Position, world units.
        quat (np.ndarray): Rotation quaternion (w, x, y, z).
        log_scale (np.ndarray): Log of the per-axis standard deviation.
        logit_opacity (float): Opacity before the sigmoid.
        color (np.ndarray): RGB in [0, 1].
    """

    mu: np.ndarray
    quat: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    log_scale: np.ndarray = field(default_factory=lambda: np.zeros(3))
    logit_opacity: float = 0.0
    color: np.ndarray = field(default_factory=lambda: np.full(3, 0.5))

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(3)
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(3)
        self.logit_opacity = float(self.logit_opacity)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(3)

    @property
    def opacity(self) -> float:
        return float(expit(self.logit_opacity))

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def is_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.mu))
            and np.all(np.isfinite(self.quat))
            and np.all(np.isfinite(self.log_scale))
            and np.isfinite(self.logit_opacity)
            and np.all(np.isfinite(self.color))
        )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-to-camera rigid transform.

    A world point X maps to camera space as ``rot @ X + trans`` and to pixels as
    ``(fx·x/z + cx, fy·y/z + cy)``.
    """

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rot: np.ndarray
    trans: np.ndarray
    near: float = 0.01
    far: float = 100.0
    id: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=np.float64).reshape(3))

    def validate(self, tol: float = 1e-8) -> "Camera":
        """Check the camera invariants, raising InvalidParameterError on violation."""
        if self.width <= 0 or self.height <= 0:
            raise InvalidParameterError(f"camera {self.id}", "zero resolution")
        if not 0.0 < self.near < self.far:
            raise InvalidParameterError(f"camera {self.id}", "requires 0 < near < far")
        if not np.allclose(self.rot @ self.rot.T, np.eye(3), atol=tol):
            raise InvalidParameterError(f"camera {self.id}", "rotation is not orthonormal")
        if abs(np.linalg.det(self.rot) - 1.0) > tol:
            raise InvalidParameterError(f"camera {self.id}", "rotation determinant is not +1")
        return self

    @property
    def center(self) -> np.ndarray:
        """Camera centre in world coordinates."""
        return -self.rot.T @ self.trans

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points, dtype=np.float64) @ self.rot.T + self.trans

    def project(self, points: np.ndarray) -> np.ndarray:
        """Project world points (N, 3) to pixel coordinates (N, 2)."""
        t = self.to_camera(np.atleast_2d(points))
        return np.stack(
            [self.fx * t[:, 0] / t[:, 2] + self.cx, self.fy * t[:, 1] / t[:, 2] + self.cy],
            axis=1,
        )


@dataclass
class GaussianCloud:
    """Struct-of-arrays container of N Gaussians.

    Attributes:
        mu (np.ndarray): (N, 3) positions.
        quat (np.ndarray): (N, 4) quaternions (w, x, y, z).
        log_scale (np.ndarray): (N, 3) log standard deviations.
        logit_opacity (np.ndarray): (N,) opacity logits.
        color (np.ndarray): (N, 3) RGB colors.
        grad_accum (np.ndarray): (N, 2) accumulated screen-space gradient norm and count.
        ids (np.ndarray): (N,) unique insertion ids.
        next_id (int): Id handed to the next inserted Gaussian.
    """

    mu: np.ndarray
    quat: np.ndarray
    log_scale: np.ndarray
    logit_opacity: np.ndarray
    color: np.ndarray
    grad_accum: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    next_id: Optional[int] = None

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1, 3)
        n = self.mu.shape[0]
        self.quat = np.asarray(self.quat, dtype=np.float64).reshape(n, 4)
        self.log_scale = np.asarray(self.log_scale, dtype=np.float64).reshape(n, 3)
        self.logit_opacity = np.asarray(self.logit_opacity, dtype=np.float64).reshape(n)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(n, 3)
        if self.grad_accum is None:
            self.grad_accum = np.zeros((n, 2))
        self.grad_accum = np.asarray(self.grad_accum, dtype=np.float64).reshape(n, 2)
        if self.ids is None:
            self.ids = np.arange(n, dtype=np.int64)
        self.ids = np.asarray(self.ids, dtype=np.int64).reshape(n)
        if self.next_id is None:
            self.next_id = int(self.ids.max()) + 1 if n else 0
        if len(np.unique(self.ids)) != n:
            raise InvalidParameterError("ids", "Gaussian ids must be unique")

    @classmethod
    def empty(cls) -> "GaussianCloud":
        return cls(
            mu=np.zeros((0, 3)),
            quat=np.zeros((0, 4)),
            log_scale=np.zeros((0, 3)),
            logit_opacity=np.zeros(0),
            color=np.zeros((0, 3)),
        )

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian3D]) -> "GaussianCloud":
        if not gaussians:
            return cls.empty()
        return cls(
            mu=np.stack([g.mu for g in gaussians]),
            quat=np.stack([g.quat for g in gaussians]),
            log_scale=np.stack([g.log_scale for g in gaussians]),
            logit_opacity=np.array([g.logit_opacity for g in gaussians]),
            color=np.stack([g.color for g in gaussians]),
        )

    def __len__(self) -> int:
        return self.mu.shape[0]

    def __getitem__(self, index: int) -> Gaussian3D:
        return Gaussian3D(
            mu=self.mu[index].copy(),
            quat=self.quat[index].copy(),
            log_scale=self.log_scale[index].copy(),
            logit_opacity=float(self.logit_opacity[index]),
            color=self.color[index].copy(),
        )

    def __iter__(self) -> Iterator[Gaussian3D]:
        for i in range(len(self)):
            yield self[i]

    @property
    def opacity(self) -> np.ndarray:
        return expit(self.logit_opacity)

    @property
    def scale(self) -> np.ndarray:
        return np.exp(self.log_scale)

    def params(self) -> Dict[str, np.ndarray]:
        """The optimizable arrays keyed by parameter group (views, not copies)."""
        return {name: getattr(self, name) for name in PARAM_GROUPS}

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            mu=self.mu.copy(),
            quat=self.quat.copy(),
            log_scale=self.log_scale.copy(),
            logit_opacity=self.logit_opacity.copy(),
            color=self.color.copy(),
            grad_accum=self.grad_accum.copy(),
            ids=self.ids.copy(),
            next_id=self.next_id,
        )

    def take(self, indices: Iterable[int]) -> "GaussianCloud":
        """Sub-cloud with the given rows, ids and statistics preserved."""
        idx = np.asarray(list(indices) if not isinstance(indices, np.ndarray) else indices)
        if idx.dtype == bool:
            idx = np.flatnonzero(idx)
        idx = idx.astype(np.int64)
        return GaussianCloud(
            mu=self.mu[idx],
            quat=self.quat[idx],
            log_scale=self.log_scale[idx],
            logit_opacity=self.logit_opacity[idx],
            color=self.color[idx],
            grad_accum=self.grad_accum[idx],
            ids=self.ids[idx],
            next_id=self.next_id,
        )

    def append(
        self,
        mu: np.ndarray,
        quat: np.ndarray,
        log_scale: np.ndarray,
        logit_opacity: np.ndarray,
        color: np.ndarray,
    ) -> np.ndarray:
        """Append new Gaussians in place; returns the ids assigned to them."""
        mu = np.asarray(mu, dtype=np.float64).reshape(-1, 3)
        n_new = mu.shape[0]
        new_ids = np.arange(self.next_id, self.next_id + n_new, dtype=np.int64)
        self.mu = np.concatenate([self.mu, mu])
        self.quat = np.concatenate([self.quat, np.reshape(quat, (n_new, 4))])
        self.log_scale = np.concatenate([self.log_scale, np.reshape(log_scale, (n_new, 3))])
        self.logit_opacity = np.concatenate(
            [self.logit_opacity, np.reshape(logit_opacity, n_new)]
        )
        self.color = np.concatenate([self.color, np.reshape(color, (n_new, 3))])
        self.grad_accum = np.concatenate([self.grad_accum, np.zeros((n_new, 2))])
        self.ids = np.concatenate([self.ids, new_ids])
        self.next_id += n_new
        return new_ids

    def reset_grad_stats(self) -> None:
        self.grad_accum = np.zeros((len(self), 2))

    def normalize_quats(self) -> None:
        self.quat = normalize_quat(self.quat)

    def check_finite(self) -> None:
        for name in PARAM_GROUPS:
            if not np.all(np.isfinite(getattr(self, name))):
                raise InvalidParameterError(name, "contains non-finite values")


def inverse_sigmoid(p: np.ndarray) -> np.ndarray:
    return logit(p)


def normalize_quat(q: np.ndarray) -> np.ndarray:
    """Normalize quaternions along the last axis."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(norm < 1e-12):
        raise InvalidParameterError("quat", "zero-norm quaternion")
    return q / norm


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrices of (already normalized) quaternions, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=-2,
    )


def rotmat_quat_jacobian(q: np.ndarray) -> np.ndarray:
    """Partial derivatives dR/dq of ``quat_to_rotmat``, shape (..., 4, 3, 3)."""
    q = np.asarray(q, dtype=np.float64)
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    zero = np.zeros_like(w)

    def mat(rows):
        return np.stack([np.stack(r, -1) for r in rows], -2)

    d_w = mat([[zero, -2 * z, 2 * y], [2 * z, zero, -2 * x], [-2 * y, 2 * x, zero]])
    d_x = mat([[zero, 2 * y, 2 * z], [2 * y, -4 * x, -2 * w], [2 * z, 2 * w, -4 * x]])
    d_y = mat([[-4 * y, 2 * x, 2 * w], [2 * x, zero, 2 * z], [-2 * w, 2 * z, -4 * y]])
    d_z = mat([[-4 * z, -2 * w, 2 * x], [2 * w, -4 * z, 2 * y], [2 * x, 2 * y, zero]])
    return np.stack([d_w, d_x, d_y, d_z], axis=-3)


def build_covariances(quat: np.ndarray, log_scale: np.ndarray) -> np.ndarray:
    """Batched Σ = R S Sᵀ Rᵀ for (N, 4) quaternions and (N, 3) log-scales."""
    rot = quat_to_rotmat(normalize_quat(quat))
    m = rot * np.exp(log_scale)[..., None, :]
    return m @ np.swapaxes(m, -1, -2)


def build_covariance(g: Gaussian3D) -> np.ndarray:
    """Assemble the 3D covariance of a Gaussian from its rotation and scales.

    Args:
        g (Gaussian3D): The Gaussian; its quaternion is normalized on the fly.

    Returns:
        np.ndarray: The symmetric positive semi-definite 3×3 matrix R·S·Sᵀ·Rᵀ.

    Raises:
        InvalidParameterError: If any field of the Gaussian is non-finite.
    """
    if not g.is_finite():
        raise InvalidParameterError("gaussian", "non-finite field")
    cov = build_covariances(g.quat[None], g.log_scale[None])[0]
    return 0.5 * (cov + cov.T)


def covariance_trace(log_scale: np.ndarray) -> np.ndarray:
    """tr(RSSᵀRᵀ) = tr(SSᵀ) = Σ exp(2·log_scale); rotation drops out of the trace."""
    return np.sum(np.exp(2.0 * np.asarray(log_scale, dtype=np.float64)), axis=-1)


def check_covariance(m: np.ndarray) -> np.ndarray:
    """Validate a (..., 3, 3) covariance: symmetric and positive semi-definite."""
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise DimensionMismatchError("covariance", f"expected (..., 3, 3), got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidParameterError("covariance", "non-finite entries")
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if np.max(np.abs(m - np.swapaxes(m, -1, -2)), initial=0.0) > SYMMETRY_TOL * scale:
        raise InvalidParameterError("covariance", "matrix is not symmetric")
    return m


def sqrt_spd(m: np.ndarray) -> np.ndarray:
    """Principal square root of symmetric positive semi-definite matrices.

    Uses the symmetric eigendecomposition m = V·diag(λ)·Vᵀ and returns
    V·diag(√λ)·Vᵀ. Works on a single 3×3 matrix or a stack (..., 3, 3).

    Args:
        m (np.ndarray): Symmetric PSD matrix or stack of matrices.

    Returns:
        np.ndarray: Symmetric PSD B with B·B = m.

    Raises:
        InvalidParameterError: If m is not symmetric or has an eigenvalue below -1e-9.
    """
    m = check_covariance(m)
    eigvals, eigvecs = np.linalg.eigh(0.5 * (m + np.swapaxes(m, -1, -2)))
    if np.any(eigvals < -NEGATIVE_EIG_TOL):
        raise InvalidParameterError(
            "covariance", f"negative eigenvalue {float(eigvals.min()):.3e}"
        )
    root = np.sqrt(np.clip(eigvals, 0.0, None))
    b = (eigvecs * root[..., None, :]) @ np.swapaxes(eigvecs, -1, -2)
    return 0.5 * (b + np.swapaxes(b, -1, -2))


def inv_spd(m: np.ndarray, min_eig: float = 1e-12) -> np.ndarray:
    """Inverse of symmetric positive definite matrices via eigendecomposition."""
    m = check_covariance(m)
    eigvals, eigvecs = np.linalg.eigh(0.5 * (m + np.swapaxes(m, -1, -2)))
    if np.any(eigvals <= min_eig):
        raise DegenerateGeometryError(
            "covariance", f"singular matrix, smallest eigenvalue {float(eigvals.min()):.3e}"
        )
    inv = (eigvecs / eigvals[..., None, :]) @ np.swapaxes(eigvecs, -1, -2)
    return 0.5 * (inv + np.swapaxes(inv, -1, -2))
