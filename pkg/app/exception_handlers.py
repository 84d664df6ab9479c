from __future__ import annotations

import logging
import sys
from typing import Optional

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2


class InvalidInputException(Exception):
    """Base class for every data error raised by the toolkit.

    Args:
        name (str): The element that failed validation (field, camera id, PLY property...).
        value (str): The offending value or a short description of the problem.
    """

    def __init__(self, name: str, value: str):
        self.name = name
        self.value = value
        super().__init__(f"Error reading {name}, check again: {value}")


class InvalidParameterError(InvalidInputException):
    """A numeric parameter is non-finite or outside its valid range."""


class DimensionMismatchError(InvalidInputException):
    """Array shapes that must agree do not."""


class DegenerateGeometryError(InvalidInputException):
    """Singular covariance, degenerate epipolar line or too few Gaussians."""


class PlyParseError(InvalidInputException):
    """Malformed PLY header, wrong property set or truncated payload."""


class CameraParseError(InvalidInputException):
    """Invalid camera record in a cameras file."""


class TensorFileError(InvalidInputException):
    """Malformed plain binary tensor file."""


class TrainingDivergedError(InvalidInputException):
    """The loss became non-finite during optimization."""

    def __init__(self, iteration: int, snapshot: Optional[str] = None):
        self.iteration = iteration
        self.snapshot = snapshot
        detail = f"non-finite loss at iteration {iteration}"
        if snapshot:
            detail += f", snapshot written to {snapshot}"
        super().__init__("loss", detail)


class UsageError(Exception):
    """Command-line usage error (unknown flag, missing required flag)."""

    def __init__(self, message: str, usage: str = ""):
        self.message = message
        self.usage = usage
        super().__init__(message)


def cli_exception_handler(exc: Exception) -> int:
    """Report an exception raised by a subcommand and map it to an exit code.

    Args:
        exc (Exception): The exception raised while running a subcommand.

    Returns:
        int: 1 for usage errors, 2 for data errors.
    """
    if isinstance(exc, UsageError):
        if exc.usage:
            sys.stderr.write(exc.usage.rstrip() + "\n")
        sys.stderr.write(f"error: {exc.message}\n")
        return EXIT_USAGE
    if isinstance(exc, InvalidInputException):
        logger.error("%s", exc)
        return EXIT_DATA
    if isinstance(exc, (OSError, ValueError)):
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_DATA
    raise exc
