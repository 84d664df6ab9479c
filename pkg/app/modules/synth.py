from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import List
from typing import Optional
from typing import Union

import numpy as np

from app.modules.gaussians import Camera
from app.modules.gaussians import GaussianCloud
from app.modules.gaussians import inverse_sigmoid
from app.modules.gaussians import normalize_quat
from app.modules.ply_io import load_ply
from app.modules.ply_io import save_ply
from app.modules.rasterizer import DEFAULT_SETTINGS
from app.modules.rasterizer import render
from app.modules.scene_io import image_path
from app.modules.scene_io import save_cameras
from app.modules.scene_io import write_png
from app.modules.trainer import make_rng
from app.schemas.config_schema import RasterSettings
from app.schemas.config_schema import SynthConfig

logger = logging.getLogger(__name__)

PathLike = Union[str, os.PathLike]

CAMERAS_FILE = "cameras.json"
IMAGES_DIR = "images"
RENDERS_DIR = "renders"
GROUND_TRUTH_FILE = "gt.ply"


def look_at(center: np.ndarray, target: np.ndarray, up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """World-to-camera rotation of a camera at ``center`` looking at ``target``.

    Camera axes: x right, y down, z forward.
    """
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    return np.stack([right, down, forward])


def orbit_cameras(cfg: SynthConfig) -> List[Camera]:
    """Inward-facing cameras on a ring around the origin, elevation alternating ±."""
    focal = 0.5 * cfg.size / np.tan(np.radians(cfg.fov) / 2.0)
    cameras = []
    for i in range(cfg.n_views):
        azimuth = 2.0 * np.pi * i / cfg.n_views
        elevation = np.radians(cfg.elevation if i % 2 == 0 else -cfg.elevation)
        center = cfg.radius * np.array(
            [
                np.cos(elevation) * np.cos(azimuth),
                np.cos(elevation) * np.sin(azimuth),
                np.sin(elevation),
            ]
        )
        rot = look_at(center, np.zeros(3))
        cameras.append(
            Camera(
                width=cfg.size,
                height=cfg.size,
                fx=focal,
                fy=focal,
                cx=cfg.size / 2.0,
                cy=cfg.size / 2.0,
                rot=rot,
                trans=-rot @ center,
                id=i,
            )
        )
    return cameras


def ground_truth_cloud(n: int, seed: int = 0, half_extent: float = 0.35) -> GaussianCloud:
    """Random colorful anisotropic Gaussians inside the unit cube."""
    rng = make_rng(seed)
    return GaussianCloud(
        mu=rng.uniform(-half_extent, half_extent, size=(n, 3)),
        quat=normalize_quat(rng.normal(size=(n, 4))),
        log_scale=np.log(rng.uniform(0.04, 0.12, size=(n, 3))),
        logit_opacity=inverse_sigmoid(rng.uniform(0.6, 0.95, size=n)),
        color=rng.uniform(0.1, 0.9, size=(n, 3)),
    )


@dataclass
class SynthFixture:
    cameras: List[Camera]
    cloud: GaussianCloud
    renders: List[np.ndarray]
    cameras_path: str
    images_dir: str
    ply_path: str


def make_fixture(
    out_dir: PathLike,
    cfg: Optional[SynthConfig] = None,
    settings: RasterSettings = DEFAULT_SETTINGS,
    threads: Optional[int] = None,
) -> SynthFixture:
    """Write a self-reconstruction fixture.

    The directory receives ``cameras.json``, the ground-truth ``gt.ply``, one RGBA PNG
    per camera under ``images/`` and the float renders under ``renders/`` as ``.npy``.
    Images are rendered from the cloud as read back from the PLY, so rendering ``gt.ply``
    reproduces them exactly.
    """
    cfg = cfg or SynthConfig()
    out_dir = os.fspath(out_dir)
    cameras = orbit_cameras(cfg)
    cameras_path = os.path.join(out_dir, CAMERAS_FILE)
    ply_path = os.path.join(out_dir, GROUND_TRUTH_FILE)
    images_dir = os.path.join(out_dir, IMAGES_DIR)
    renders_dir = os.path.join(out_dir, RENDERS_DIR)
    os.makedirs(renders_dir, exist_ok=True)

    save_cameras(cameras, cameras_path)
    save_ply(ground_truth_cloud(cfg.n_gaussians, cfg.seed), ply_path)
    cloud = load_ply(ply_path)

    renders = []
    for cam in cameras:
        buffer = render(cloud, cam, settings, threads)
        write_png(image_path(images_dir, cam.id), buffer.color, buffer.alpha)
        np.save(image_path(renders_dir, cam.id, ".npy"), buffer.color)
        renders.append(buffer.color)
    logger.info("Wrote %d-view %s fixture to %s", len(cameras), cfg.preset.value, out_dir)
    return SynthFixture(
        cameras=cameras,
        cloud=cloud,
        renders=renders,
        cameras_path=cameras_path,
        images_dir=images_dir,
        ply_path=ply_path,
    )
