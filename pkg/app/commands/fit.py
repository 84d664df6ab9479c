from __future__ import annotations

import argparse
import logging
import os

from app.commands import add_threads_argument
from app.commands import box6
from app.exception_handlers import EXIT_OK
from app.modules.ply_io import save_ply
from app.modules.scene_io import load_scene
from app.modules.telemetry import TrainingTelemetry
from app.modules.trainer import fit
from app.modules.trainer import write_metrics
from app.schemas.config_schema import GdsConfig
from app.schemas.config_schema import GdsForm
from app.schemas.config_schema import LearningRates
from app.schemas.config_schema import SceneBounds
from app.schemas.config_schema import TrainConfig

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("fit", help="Fit a Gaussian cloud to posed images")
    parser.add_argument("--cameras", required=True, help="Cameras JSON file")
    parser.add_argument("--images", required=True, help="Directory with <id:03d>.png images")
    parser.add_argument("--out", required=True, help="Output PLY file")
    parser.add_argument("--iters", type=int, default=2000)
    parser.add_argument("--n-init", type=int, default=100, help="Initial number of Gaussians")
    parser.add_argument("--gds-threshold", type=float, default=0.1)
    parser.add_argument(
        "--gds-form", choices=[form.value for form in GdsForm], default=GdsForm.WASSERSTEIN.value
    )
    parser.add_argument(
        "--gds-absolute",
        action="store_true",
        help="Gate on the raw GDS instead of the scale-relative value",
    )
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--metrics", default=None, help="Metrics CSV file")
    parser.add_argument(
        "--bounds",
        type=box6,
        default=None,
        help="Initialization box as x0,y0,z0,x1,y1,z1 (default: the unit cube)",
    )
    parser.add_argument("--uniform-lr", action="store_true", help="Use one learning rate for all groups")
    parser.add_argument("--checkpoint-interval", type=int, default=0)
    parser.add_argument(
        "--timing", action="store_true", help="Record wall time in ms_elapsed (otherwise written as 0)"
    )
    parser.add_argument("--prom-file", default=None, help="Write Prometheus metrics to this file")
    add_threads_argument(parser)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    bounds = None
    if args.bounds is not None:
        bounds = SceneBounds(lower=args.bounds[:3], upper=args.bounds[3:])
    cfg = TrainConfig(
        iters=args.iters,
        n_init=args.n_init,
        seed=args.seed,
        lr=LearningRates(uniform=args.uniform_lr),
        gds=GdsConfig(
            threshold=args.gds_threshold, form=args.gds_form, relative=not args.gds_absolute
        ),
        checkpoint_interval=args.checkpoint_interval,
        record_timing=args.timing,
    )
    _, views = load_scene(args.cameras, args.images, bounds)
    telemetry = TrainingTelemetry() if args.prom_file else None
    result = fit(
        views,
        cfg,
        bounds=bounds,
        out_dir=os.path.dirname(os.path.abspath(args.out)),
        threads=args.threads,
        telemetry=telemetry,
    )
    save_ply(result.cloud, args.out)
    logger.info("Wrote %d Gaussians to %s", len(result.cloud), args.out)
    if args.metrics:
        write_metrics(result.metrics, args.metrics)
    if telemetry is not None:
        telemetry.write(args.prom_file)
    return EXIT_OK
