from __future__ import annotations

import json
import logging
import os
from typing import List
from typing import Optional
from typing import Sequence
from typing import Tuple
from typing import Union

import numpy as np
from PIL import Image
from pydantic import ValidationError

from app.exception_handlers import CameraParseError
from app.exception_handlers import DimensionMismatchError
from app.exception_handlers import InvalidParameterError
from app.modules.gaussians import Camera
from app.schemas.camera_schema import CameraRecord
from app.schemas.camera_schema import SceneManifest
from app.schemas.config_schema import SceneBounds

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

ORTHONORMAL_TOL = 1e-6
POLAR_TOL = 1e-3


def _record_label(item, index: int) -> str:
    if isinstance(item, dict) and "id" in item:
        return f"camera {item['id']}"
    return f"camera #{index}"


def _orthonormal_rotation(rot: np.ndarray, label: str) -> np.ndarray:
    if np.linalg.det(rot) <= 0.0:
        raise CameraParseError(label, "rotation has det -1 (reflection)")
    error = float(np.max(np.abs(rot @ rot.T - np.eye(3))))
    if error <= ORTHONORMAL_TOL:
        return rot
    if error > POLAR_TOL:
        raise CameraParseError(label, f"rotation is not orthonormal (error {error:.2e})")
    u, _, vt = np.linalg.svd(rot)
    logger.warning("%s: re-orthonormalized rotation (error %.2e)", label, error)
    return u @ vt


def camera_from_record(record: CameraRecord) -> Camera:
    """Build a validated Camera from a parsed record."""
    label = f"camera {record.id}"
    rot = _orthonormal_rotation(np.asarray(record.rot, dtype=np.float64).reshape(3, 3), label)
    values = [record.fx, record.fy, record.cx, record.cy, *record.trans]
    if not np.all(np.isfinite(values)):
        raise CameraParseError(label, "non-finite intrinsics or translation")
    if not record.near < record.far:
        raise CameraParseError(label, "requires near < far")
    return Camera(
        width=record.width,
        height=record.height,
        fx=record.fx,
        fy=record.fy,
        cx=record.cx,
        cy=record.cy,
        rot=rot,
        trans=np.asarray(record.trans, dtype=np.float64),
        near=record.near,
        far=record.far,
        id=record.id,
    )


def camera_to_record(cam: Camera) -> CameraRecord:
    return CameraRecord(
        id=cam.id,
        width=cam.width,
        height=cam.height,
        fx=cam.fx,
        fy=cam.fy,
        cx=cam.cx,
        cy=cam.cy,
        rot=cam.rot.ravel().tolist(),
        trans=cam.trans.tolist(),
        near=cam.near,
        far=cam.far,
    )


def parse_camera_records(path: PathLike) -> List[CameraRecord]:
    try:
        with open(path) as handle:
            document = json.load(handle)
    except json.JSONDecodeError as e:
        raise CameraParseError(os.fspath(path), f"invalid JSON: {e}")
    if not isinstance(document, list):
        raise CameraParseError(os.fspath(path), "expected a top-level array of cameras")

    records = []
    seen = set()
    for index, item in enumerate(document):
        label = _record_label(item, index)
        try:
            record = CameraRecord.model_validate(item)
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(p) for p in err['loc']) or 'record'}: {err['msg']}" for err in e.errors()
            )
            raise CameraParseError(label, problems)
        if record.id in seen:
            raise CameraParseError(label, "duplicate camera id")
        seen.add(record.id)
        records.append(record)
    return records


def parse_cameras(path: PathLike) -> List[Camera]:
    """Read cameras from a JSON array of records.

    Rotations within 1e-6 of orthonormal are kept as written, those within 1e-3 are
    re-orthonormalized by polar decomposition, the rest are rejected.

    Args:
        path (PathLike): cameras JSON file.

    Returns:
        List[Camera]: Cameras in file order.

    Raises:
        CameraParseError: Missing field, bad rotation or duplicate id; the message names
            the camera id.
    """
    cameras = [camera_from_record(record) for record in parse_camera_records(path)]
    logger.debug("Parsed %d cameras from %s", len(cameras), path)
    return cameras


def save_cameras(cameras: Sequence[Camera], path: PathLike) -> None:
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    records = [camera_to_record(cam).model_dump() for cam in cameras]
    with open(path, "w") as handle:
        json.dump(records, handle, indent=2)


def find_camera(cameras: Sequence[Camera], camera_id: int) -> Camera:
    for cam in cameras:
        if cam.id == camera_id:
            return cam
    raise CameraParseError(f"camera {camera_id}", "no camera with this id")


def to_uint8(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path: PathLike, color: np.ndarray, alpha: Optional[np.ndarray] = None) -> None:
    """Write an image with values in [0, 1] as PNG.

    With ``alpha`` the file is RGBA with straight alpha: the premultiplied ``color`` is
    divided by alpha wherever alpha is positive. A 2D ``color`` is written as grayscale.
    """
    directory = os.path.dirname(os.fspath(path))
    if directory:
        os.makedirs(directory, exist_ok=True)
    color = np.asarray(color, dtype=np.float64)
    if color.ndim == 2 or alpha is None:
        Image.fromarray(to_uint8(color)).save(path)
        return
    alpha = np.asarray(alpha, dtype=np.float64)
    safe = np.where(alpha > 0.0, alpha, 1.0)[..., None]
    straight = np.where(alpha[..., None] > 0.0, color / safe, 0.0)
    rgba = np.concatenate([to_uint8(straight), to_uint8(alpha)[..., None]], axis=2)
    Image.fromarray(rgba).save(path)


def read_image(path: PathLike) -> np.ndarray:
    """Read a PNG (or a float .npy dump) as an H×W×3 float image in [0, 1].

    RGBA images are composited over black.
    """
    if os.fspath(path).endswith(".npy"):
        image = np.load(path)
        if image.ndim != 3 or image.shape[2] != 3:
            raise DimensionMismatchError(os.fspath(path), f"expected H×W×3, got {image.shape}")
        return image.astype(np.float64)
    with Image.open(path) as img:
        if img.mode in ("RGBA", "LA", "PA") or "transparency" in img.info:
            rgba = np.asarray(img.convert("RGBA"), dtype=np.float64) / 255.0
            return rgba[..., :3] * rgba[..., 3:4]
        return np.asarray(img.convert("RGB"), dtype=np.float64) / 255.0


def image_path(images_dir: PathLike, camera_id: int, suffix: str = ".png") -> str:
    return os.path.join(os.fspath(images_dir), f"{camera_id:03d}{suffix}")


def load_scene(
    cameras_path: PathLike,
    images_dir: PathLike,
    bounds: Optional[SceneBounds] = None,
) -> Tuple[SceneManifest, List[Tuple[Camera, np.ndarray]]]:
    """Pair every camera with its image ``<images_dir>/<id:03d>.png``.

    Returns:
        The scene manifest and the (camera, image) views.

    Raises:
        CameraParseError: Invalid cameras file.
        InvalidParameterError: A camera has no image.
        DimensionMismatchError: An image does not match its camera size.
    """
    records = parse_camera_records(cameras_path)
    cameras = [camera_from_record(record) for record in records]
    views = []
    paths = []
    for cam in cameras:
        path = image_path(images_dir, cam.id)
        if not os.path.exists(path):
            raise InvalidParameterError(f"image for camera {cam.id}", f"{path} does not exist")
        image = read_image(path)
        if image.shape[:2] != (cam.height, cam.width):
            raise DimensionMismatchError(
                f"image for camera {cam.id}",
                f"{image.shape[1]}x{image.shape[0]} vs camera {cam.width}x{cam.height}",
            )
        views.append((cam, image))
        paths.append(path)
    manifest = SceneManifest(cameras=records, images=paths, bounds=bounds or SceneBounds())
    logger.info("Loaded %d views from %s", len(views), images_dir)
    return manifest, views
