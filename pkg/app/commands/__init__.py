from __future__ import annotations

import argparse
from typing import Tuple

from app.exception_handlers import UsageError


class CommandParser(argparse.ArgumentParser):
    """Argument parser that raises UsageError instead of exiting."""

    def error(self, message: str):
        raise UsageError(message, self.format_usage())


def float_list(text: str, count: int) -> Tuple[float, ...]:
    try:
        values = tuple(float(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}")
    if len(values) != count:
        raise argparse.ArgumentTypeError(f"expected {count} comma-separated numbers, got {text!r}")
    return values


def point2d(text: str) -> Tuple[float, float]:
    return float_list(text, 2)


def box6(text: str) -> Tuple[float, ...]:
    return float_list(text, 6)


def add_threads_argument(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="Rasterizer worker threads (default: FDG_THREADS or the CPU count)",
    )

