"""Exception hierarchy shared across the toolkit.

Each category carries the process exit code used by the command line
front end (usage=2, data=3, numeric=4, io=5).
"""


class ArticulateError(Exception):
    """Base class for all toolkit errors."""

    exit_code = 1


class UsageError(ArticulateError):
    """Invalid invocation, configuration, or argument combination."""

    exit_code = 2


class DataError(ArticulateError):
    """Semantically invalid data (unknown coil, inconsistent corpus, ...)."""

    exit_code = 3


class ShapeError(DataError):
    """Dimension or length mismatch between arrays that must agree."""


class CorpusError(DataError):
    """Mesh corpus violates the shared face-set / full-grid requirements."""


class NumericError(ArticulateError):
    """Non-finite values or numerical breakdown during computation."""

    exit_code = 4


class FileError(ArticulateError):
    """Missing, unreadable, or truncated files."""

    exit_code = 5


class FormatError(FileError):
    """File content does not match the expected format."""
