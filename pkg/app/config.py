from __future__ import annotations

import logging
import os

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


def get_num_threads() -> int:
    """Number of worker threads used by the rasterizer.

    Read from the ``FDG_THREADS`` environment variable; defaults to the
    hardware parallelism of the machine.

    Returns:
        int: A positive thread count.
    """
    value = os.getenv("FDG_THREADS")
    if value:
        try:
            threads = int(value)
        except ValueError:
            logging.getLogger(__name__).warning(
                "Ignoring non-integer FDG_THREADS=%r", value
            )
        else:
            if threads >= 1:
                return threads
    return os.cpu_count() or 1


def get_log_level() -> str:
    return os.getenv("FDG_LOG_LEVEL", "INFO").upper()


def setup_logging(verbose: bool = False) -> None:
    """Configure the root logger once for command-line use."""
    level = logging.DEBUG if verbose else get_log_level()
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
