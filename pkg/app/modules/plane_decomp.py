from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List
from typing import Optional
from typing import Sequence
from typing import Union

import numpy as np
from scipy.special import softmax

from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.exception_handlers import TensorFileError

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

TENSOR_MAGIC = b"FDGT"
WEIGHT_ORDER = ("wq", "wk", "wv", "u", "sa_wq", "sa_wk", "sa_wv")


def write_tensors(path: PathLike, tensors: Sequence[np.ndarray]) -> None:
    """Write tensors back to back as FDGT records.

    Each record is the magic bytes ``FDGT``, a little-endian u32 rank, rank u32 dims and a
    float32 row-major payload.
    """
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        for tensor in tensors:
            tensor = np.asarray(tensor)
            handle.write(TENSOR_MAGIC)
            handle.write(np.asarray([tensor.ndim, *tensor.shape], dtype="<u4").tobytes())
            handle.write(np.ascontiguousarray(tensor, dtype="<f4").tobytes())


def write_tensor(path: PathLike, tensor: np.ndarray) -> None:
    write_tensors(path, [tensor])


def read_tensors(path: PathLike) -> List[np.ndarray]:
    """Read every FDGT record of a file as float64 arrays.

    Raises:
        TensorFileError: Bad magic, truncated header or truncated payload.
    """
    with open(path, "rb") as handle:
        buffer = handle.read()
    tensors = []
    offset = 0
    while offset < len(buffer):
        index = len(tensors)
        if buffer[offset : offset + 4] != TENSOR_MAGIC:
            raise TensorFileError(f"record {index}", "bad magic bytes, expected FDGT")
        offset += 4
        if offset + 4 > len(buffer):
            raise TensorFileError(f"record {index}", "truncated rank")
        rank = int(np.frombuffer(buffer, dtype="<u4", count=1, offset=offset)[0])
        offset += 4
        if offset + 4 * rank > len(buffer):
            raise TensorFileError(f"record {index}", "truncated shape")
        shape = tuple(int(d) for d in np.frombuffer(buffer, dtype="<u4", count=rank, offset=offset))
        offset += 4 * rank
        count = int(np.prod(shape, dtype=np.int64))
        if offset + 4 * count > len(buffer):
            raise TensorFileError(f"record {index}", f"truncated payload for shape {shape}")
        data = np.frombuffer(buffer, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors.append(data.astype(np.float64).reshape(shape))
    return tensors


def read_tensor(path: PathLike) -> np.ndarray:
    tensors = read_tensors(path)
    if len(tensors) != 1:
        raise TensorFileError(os.fspath(path), f"expected one tensor, found {len(tensors)}")
    return tensors[0]


@dataclass
class PlaneDecoderWeights:
    """Projections of the orthogonal-plane cross-attention.

    Attributes:
        wq, wk, wv (np.ndarray): d×d query, key and value projections.
        u (np.ndarray): n_u×d learnable query embedding.
        sa_wq, sa_wk, sa_wv (np.ndarray): d×d self-attention projections applied to u.
    """

    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    u: np.ndarray
    sa_wq: np.ndarray
    sa_wk: np.ndarray
    sa_wv: np.ndarray

    def __post_init__(self):
        for name in WEIGHT_ORDER:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64))
        d = self.d
        for name in WEIGHT_ORDER:
            value = getattr(self, name)
            expected = (self.u.shape[0], d) if name == "u" else (d, d)
            if value.shape != expected:
                raise DimensionMismatchError(name, f"expected {expected}, got {value.shape}")
            if not np.all(np.isfinite(value)):
                raise InvalidParameterError(name, "non-finite entries")

    @property
    def d(self) -> int:
        return self.u.shape[1] if self.u.ndim == 2 else 0

    @classmethod
    def random(cls, d: int, n_u: int, seed: int = 0) -> "PlaneDecoderWeights":
        """Seeded uniform initialization in ±1/√d."""
        if d < 1 or n_u < 1:
            raise InvalidParameterError("dims", f"d={d}, n_u={n_u}")
        rng = np.random.Generator(np.random.Philox(seed))
        bound = 1.0 / np.sqrt(d)

        def draw(*shape):
            return rng.uniform(-bound, bound, size=shape)

        return cls(
            wq=draw(d, d),
            wk=draw(d, d),
            wv=draw(d, d),
            u=draw(n_u, d),
            sa_wq=draw(d, d),
            sa_wk=draw(d, d),
            sa_wv=draw(d, d),
        )

    @classmethod
    def load(cls, path: PathLike) -> "PlaneDecoderWeights":
        tensors = read_tensors(path)
        if len(tensors) != len(WEIGHT_ORDER):
            raise TensorFileError(
                os.fspath(path), f"expected {len(WEIGHT_ORDER)} tensors, found {len(tensors)}"
            )
        return cls(**dict(zip(WEIGHT_ORDER, tensors)))

    def save(self, path: PathLike) -> None:
        write_tensors(path, [getattr(self, name) for name in WEIGHT_ORDER])


@dataclass
class PlaneFeatures:
    """Orthogonal-plane feature grids and the latent they are decoded from."""

    f_xy: np.ndarray
    f_yz: np.ndarray
    f_xz: np.ndarray
    h: Optional[np.ndarray] = None

    def combine(self) -> np.ndarray:
        return combine_planes(self.f_xy, self.f_yz, self.f_xz)


def _attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, d: int):
    probabilities = softmax(q @ k.T / np.sqrt(d), axis=1)
    return probabilities, probabilities @ v


def _check_inputs(u: np.ndarray, h: np.ndarray, weights: PlaneDecoderWeights):
    u = np.asarray(u, dtype=np.float64)
    h = np.asarray(h, dtype=np.float64)
    d = weights.d
    if u.ndim != 2 or u.shape[1] != d:
        raise DimensionMismatchError("u", f"expected (n_u, {d}), got {u.shape}")
    if h.ndim != 2 or h.shape[1] != d or h.shape[0] < 1:
        raise DimensionMismatchError("h", f"expected (n_h, {d}), got {h.shape}")
    return u, h


def self_attention(x: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray) -> np.ndarray:
    """Single-head scaled dot-product self-attention over the rows of x."""
    x = np.asarray(x, dtype=np.float64)
    return _attend(x @ wq.T, x @ wk.T, x @ wv.T, x.shape[1])[1]


def cross_attn_probabilities(
    u: np.ndarray, h: np.ndarray, weights: PlaneDecoderWeights
) -> np.ndarray:
    """(n_u, n_h) attention probabilities of the query embedding over the latent rows."""
    u, h = _check_inputs(u, h, weights)
    s = self_attention(u, weights.sa_wq, weights.sa_wk, weights.sa_wv)
    return _attend(s @ weights.wq.T, h @ weights.wk.T, h @ weights.wv.T, weights.d)[0]


def cross_attn(u: np.ndarray, h: np.ndarray, weights: PlaneDecoderWeights) -> np.ndarray:
    """SoftMax(Q·Kᵀ/√d)·V with Q from self-attended u and keys and values from h.

    Args:
        u (np.ndarray): (n_u, d) query embedding.
        h (np.ndarray): (n_h, d) latent.
        weights (PlaneDecoderWeights): Projections.

    Returns:
        np.ndarray: (n_u, d) attended features.

    Raises:
        DimensionMismatchError: If u or h do not match the weight dimension.
    """
    u, h = _check_inputs(u, h, weights)
    s = self_attention(u, weights.sa_wq, weights.sa_wk, weights.sa_wv)
    return _attend(s @ weights.wq.T, h @ weights.wk.T, h @ weights.wv.T, weights.d)[1]


def _softmax_backward(p: np.ndarray, grad_p: np.ndarray) -> np.ndarray:
    return p * (grad_p - np.sum(grad_p * p, axis=1, keepdims=True))


def cross_attn_grad_u(
    u: np.ndarray, h: np.ndarray, weights: PlaneDecoderWeights, grad_out: np.ndarray
) -> np.ndarray:
    """Gradient of ⟨grad_out, cross_attn(u, h, weights)⟩ with respect to u."""
    u, h = _check_inputs(u, h, weights)
    grad_out = np.asarray(grad_out, dtype=np.float64)
    d = weights.d
    scale = 1.0 / np.sqrt(d)

    qs, ks, vs = u @ weights.sa_wq.T, u @ weights.sa_wk.T, u @ weights.sa_wv.T
    p1, s = _attend(qs, ks, vs, d)
    q = s @ weights.wq.T
    k, v = h @ weights.wk.T, h @ weights.wv.T
    p2, out = _attend(q, k, v, d)
    if grad_out.shape != out.shape:
        raise DimensionMismatchError("grad_out", f"expected {out.shape}, got {grad_out.shape}")

    grad_s2 = _softmax_backward(p2, grad_out @ v.T)
    grad_s = (grad_s2 @ k * scale) @ weights.wq

    grad_vs = p1.T @ grad_s
    grad_s1 = _softmax_backward(p1, grad_s @ vs.T)
    grad_qs = grad_s1 @ ks * scale
    grad_ks = grad_s1.T @ qs * scale
    return grad_qs @ weights.sa_wq + grad_ks @ weights.sa_wk + grad_vs @ weights.sa_wv


def combine_planes(f_xy: np.ndarray, f_yz: np.ndarray, f_xz: np.ndarray) -> np.ndarray:
    """F = concat_channels(f_xy, f_yz + f_xz) for H×W×C plane features.

    Raises:
        DimensionMismatchError: Unequal spatial dims, or f_yz and f_xz channel counts differ.
    """
    f_xy, f_yz, f_xz = (np.asarray(f, dtype=np.float64) for f in (f_xy, f_yz, f_xz))
    for name, f in (("f_xy", f_xy), ("f_yz", f_yz), ("f_xz", f_xz)):
        if f.ndim != 3:
            raise DimensionMismatchError(name, f"expected H×W×C, got {f.shape}")
    if not f_xy.shape[:2] == f_yz.shape[:2] == f_xz.shape[:2]:
        raise DimensionMismatchError(
            "planes", f"spatial dims {f_xy.shape[:2]}, {f_yz.shape[:2]}, {f_xz.shape[:2]}"
        )
    if f_yz.shape[2] != f_xz.shape[2]:
        raise DimensionMismatchError("planes", f"f_yz has {f_yz.shape[2]} channels, f_xz {f_xz.shape[2]}")
    return np.concatenate([f_xy, f_yz + f_xz], axis=2)
