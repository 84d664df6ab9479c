from __future__ import annotations

import argparse
import logging

import numpy as np

from app.exception_handlers import EXIT_OK
from app.modules.plane_decomp import PlaneDecoderWeights
from app.modules.plane_decomp import PlaneFeatures
from app.modules.plane_decomp import cross_attn
from app.modules.plane_decomp import cross_attn_probabilities
from app.modules.trainer import make_rng

logger = logging.getLogger(__name__)


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("planes", help="Run the plane-decomposition math on toy inputs")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--weights", default=None, help="FDGT weights file to load")
    parser.add_argument("--save-weights", default=None, help="Write the weights used as FDGT")
    parser.add_argument("--dim", type=int, default=8, help="Latent dimension d")
    parser.add_argument("--n-u", type=int, default=4, help="Query embedding rows")
    parser.add_argument("--n-h", type=int, default=6, help="Latent rows")
    parser.add_argument("--grid", type=int, default=8, help="Plane grid size")
    parser.add_argument("--channels", type=int, default=64, help="Channels per plane")
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.weights:
        weights = PlaneDecoderWeights.load(args.weights)
    else:
        weights = PlaneDecoderWeights.random(args.dim, args.n_u, args.seed)
    rng = make_rng(args.seed)
    h = rng.normal(size=(args.n_h, weights.d))
    attended = cross_attn(weights.u, h, weights)
    row_sums = cross_attn_probabilities(weights.u, h, weights).sum(axis=1)

    shape = (args.grid, args.grid, args.channels)
    planes = PlaneFeatures(
        f_xy=rng.normal(size=shape), f_yz=rng.normal(size=shape), f_xz=rng.normal(size=shape), h=h
    )
    combined = planes.combine()

    print(f"cross_attn output: {attended.shape}")
    print(f"attention row sums: {np.array2string(row_sums, precision=6)}")
    print(f"combined planes: {combined.shape}")
    if args.save_weights:
        weights.save(args.save_weights)
        logger.info("Wrote plane decoder weights to %s", args.save_weights)
    return EXIT_OK
