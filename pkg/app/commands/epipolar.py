from __future__ import annotations

import argparse
import logging
import os

import numpy as np
import pandas as pd

from app.commands import point2d
from app.exception_handlers import EXIT_OK
from app.modules.epipolar import relative_pose
from app.modules.epipolar import weight_map
from app.modules.scene_io import find_camera
from app.modules.scene_io import parse_cameras
from app.modules.scene_io import write_png

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("epipolar", help="Epipolar weight map of a target point")
    parser.add_argument("--cameras", required=True, help="Cameras JSON file")
    parser.add_argument("--src", type=int, required=True, help="Source camera id")
    parser.add_argument("--tgt", type=int, required=True, help="Target camera id")
    parser.add_argument("--point", type=point2d, required=True, help="Normalized target point X,Y")
    parser.add_argument("--grid", type=int, default=32, help="Source grid size N (N×N)")
    parser.add_argument("--out", required=True, help="Grayscale PNG of the weight map")
    parser.add_argument("--csv", default=None, help="CSV of the weights (default: next to --out)")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    cameras = parse_cameras(args.cameras)
    cam_s = find_camera(cameras, args.src)
    cam_t = find_camera(cameras, args.tgt)
    grid = args.grid
    weights = weight_map(
        np.asarray(args.point), relative_pose(cam_t, cam_s), cam_t, cam_s, grid, grid
    )
    write_png(args.out, weights)

    csv_path = args.csv or os.path.splitext(args.out)[0] + ".csv"
    rows, cols = np.indices(weights.shape)
    pd.DataFrame(
        {
            "row": rows.ravel(),
            "col": cols.ravel(),
            "x": (cols.ravel() + 0.5) / grid,
            "y": (rows.ravel() + 0.5) / grid,
            "weight": weights.ravel(),
        }
    ).to_csv(csv_path, index=False)
    logger.info("Wrote %dx%d epipolar weight map to %s and %s", grid, grid, args.out, csv_path)
    return EXIT_OK
