from __future__ import annotations

import argparse
import logging

import pandas as pd

from app.commands import add_threads_argument
from app.exception_handlers import EXIT_OK
from app.modules.evaluation import evaluate_views
from app.modules.ply_io import load_ply
from app.modules.scene_io import load_scene

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("evaluate", help="Score a cloud against posed images")
    parser.add_argument("--model", required=True, help="PLY file")
    parser.add_argument("--cameras", required=True, help="Cameras JSON file")
    parser.add_argument("--images", required=True, help="Directory with <id:03d>.png images")
    parser.add_argument("--reference", default=None, help="Ground-truth PLY for the Chamfer distance")
    parser.add_argument("--csv", default=None, help="Write per-view scores as CSV")
    add_threads_argument(parser)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    cloud = load_ply(args.model)
    _, views = load_scene(args.cameras, args.images)
    reference = load_ply(args.reference) if args.reference else None
    report = evaluate_views(cloud, views, reference, threads=args.threads)

    table = pd.DataFrame([view.model_dump() for view in report.views], columns=["view", "psnr", "ssim"])
    print(table.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    print(f"mean psnr: {report.mean_psnr:.4f}")
    print(f"mean ssim: {report.mean_ssim:.4f}")
    if report.chamfer is not None:
        print(f"chamfer: {report.chamfer:.6g}")
    if args.csv:
        table.to_csv(args.csv, index=False)
        logger.info("Wrote per-view scores to %s", args.csv)
    return EXIT_OK
