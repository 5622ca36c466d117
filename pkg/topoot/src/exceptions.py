"""
Error types raised by the TopoOT pipeline.

Every error carries the process exit code the command line reports for it.
"""
from typing import Optional

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class TopoOTError(Exception):
    """Base class for all pipeline errors."""
    exit_code = EXIT_DATA


class DataError(TopoOTError, ValueError):
    """Input data or configuration cannot be used."""
    exit_code = EXIT_DATA


class FormatError(DataError):
    """A file does not parse in its declared format."""

    def __init__(self, message: str, path: Optional[str] = None, offset: int = 0):
        self.path = path
        self.offset = offset
        location = f"{path}@{offset}" if path else f"byte {offset}"
        super().__init__(f"{message} ({location})")


class StructuralError(DataError):
    """Dimensions of two inputs disagree."""


class ValidationError(DataError):
    """A spec or config violates its invariants."""


class DegenerateScheduleError(DataError):
    """Fewer than two distinct thresholds could be placed."""


class SizeError(DataError):
    """An exact solver was asked for an instance beyond its size limit."""


class NumericError(TopoOTError, ArithmeticError):
    """A computation produced non-finite values."""
    exit_code = EXIT_NUMERIC
