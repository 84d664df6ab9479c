from __future__ import annotations

import argparse
import logging
import os

import numpy as np

from app.commands import add_threads_argument
from app.exception_handlers import EXIT_OK
from app.modules.ply_io import load_ply
from app.modules.rasterizer import render
from app.modules.scene_io import find_camera
from app.modules.scene_io import parse_cameras
from app.modules.scene_io import write_png

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("render", help="Render a cloud from one camera")
    parser.add_argument("--model", required=True, help="PLY file")
    parser.add_argument("--cameras", required=True, help="Cameras JSON file")
    parser.add_argument("--view", type=int, required=True, help="Camera id")
    parser.add_argument("--out", required=True, help="Output RGBA PNG")
    parser.add_argument("--npy", default=None, help="Also save the float image as .npy")
    add_threads_argument(parser)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    cloud = load_ply(args.model)
    cam = find_camera(parse_cameras(args.cameras), args.view)
    buffer = render(cloud, cam, threads=args.threads)
    write_png(args.out, buffer.color, buffer.alpha)
    if args.npy:
        directory = os.path.dirname(os.path.abspath(args.npy))
        os.makedirs(directory, exist_ok=True)
        np.save(args.npy, buffer.color)
    if buffer.n_skipped:
        logger.warning("%d splats with singular 2D covariance were skipped", buffer.n_skipped)
    logger.info("Rendered view %d of %d Gaussians to %s", cam.id, len(cloud), args.out)
    return EXIT_OK
