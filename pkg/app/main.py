from __future__ import annotations

import sys
from typing import List
from typing import Optional

from app import __version__
from app.commands import CommandParser
from app.commands import epipolar
from app.commands import evaluate
from app.commands import fit
from app.commands import gds
from app.commands import planes
from app.commands import render
from app.commands import synth
from app.config import setup_logging
from app.exception_handlers import EXIT_USAGE
from app.exception_handlers import cli_exception_handler


def create_parser() -> CommandParser:
    parser = CommandParser(
        prog="gsplat-fit",
        description="""Desk-scale Gaussian splatting reconstruction: fit a Gaussian cloud to posed
        images with GDS-gated density control, render it, and inspect epipolar weights and GDS
        statistics.""",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG level")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True

    fit.add_parser(subparsers)
    render.add_parser(subparsers)
    epipolar.add_parser(subparsers)
    gds.add_parser(subparsers)
    synth.add_parser(subparsers)
    evaluate.add_parser(subparsers)
    planes.add_parser(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand.

    Returns:
        int: 0 on success, 1 on a usage error, 2 on a data error.
    """
    parser = create_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # --help and --version
        return int(e.code or 0) if isinstance(e.code, (int, type(None))) else EXIT_USAGE
    except Exception as e:
        return cli_exception_handler(e)

    setup_logging(args.verbose)
    try:
        return args.handler(args)
    except Exception as e:
        return cli_exception_handler(e)


if __name__ == "__main__":
    sys.exit(main())
