from __future__ import annotations

import argparse
import logging

import pandas as pd

from app.exception_handlers import EXIT_OK
from app.modules.density_control import gds_summary
from app.modules.ply_io import load_ply
from app.schemas.config_schema import GdsForm
from app.schemas.metrics_schema import GdsSummary

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("gds", help="Nearest-neighbour GDS statistics of a cloud")
    parser.add_argument("--model", required=True, help="PLY file")
    parser.add_argument(
        "--form", choices=[form.value for form in GdsForm], default=GdsForm.WASSERSTEIN.value
    )
    parser.add_argument("--bins", type=int, default=10, help="Histogram bins")
    parser.add_argument("--csv", default=None, help="Write the histogram as CSV")
    parser.set_defaults(handler=run)
    return parser


def histogram_frame(summary: GdsSummary) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "bin_lo": summary.bin_edges[:-1],
            "bin_hi": summary.bin_edges[1:],
            "count": summary.counts,
        }
    )


def format_summary(summary: GdsSummary) -> str:
    lines = [
        f"gaussians: {summary.count}",
        f"min: {summary.minimum:.6g}",
        f"median: {summary.median:.6g}",
        f"max: {summary.maximum:.6g}",
        "histogram:",
    ]
    peak = max(summary.counts) if summary.counts else 0
    for lo, hi, count in zip(summary.bin_edges[:-1], summary.bin_edges[1:], summary.counts):
        bar = "#" * (round(40 * count / peak) if peak else 0)
        lines.append(f"  [{lo:.4g}, {hi:.4g}) {count:6d} {bar}")
    return "\n".join(lines)


def run(args: argparse.Namespace) -> int:
    cloud = load_ply(args.model)
    summary = gds_summary(cloud, args.form, args.bins)
    print(format_summary(summary))
    if args.csv:
        histogram_frame(summary).to_csv(args.csv, index=False)
        logger.info("Wrote GDS histogram to %s", args.csv)
    return EXIT_OK
