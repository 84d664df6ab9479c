from __future__ import annotations

import argparse

from app.commands import add_threads_argument
from app.exception_handlers import EXIT_OK
from app.modules.synth import make_fixture
from app.schemas.config_schema import SynthConfig
from app.schemas.config_schema import SynthPreset


def add_parser(subparsers) -> argparse.ArgumentParser:
    parser = subparsers.add_parser("synth", help="Generate a self-reconstruction fixture")
    parser.add_argument(
        "--preset", choices=[preset.value for preset in SynthPreset], default=SynthPreset.ORBIT.value
    )
    parser.add_argument("--out", required=True, help="Output directory")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--views", type=int, default=16)
    parser.add_argument("--size", type=int, default=64, help="Image width and height")
    parser.add_argument("--gaussians", type=int, default=50, help="Ground-truth cloud size")
    add_threads_argument(parser)
    parser.set_defaults(handler=run)
    return parser


def run(args: argparse.Namespace) -> int:
    cfg = SynthConfig(
        preset=args.preset,
        n_views=args.views,
        size=args.size,
        n_gaussians=args.gaussians,
        seed=args.seed,
    )
    fixture = make_fixture(args.out, cfg, threads=args.threads)
    print(f"cameras: {fixture.cameras_path}")
    print(f"images: {fixture.images_dir}")
    print(f"model: {fixture.ply_path}")
    return EXIT_OK
