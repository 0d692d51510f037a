"""Exception hierarchy shared by every module.

Each error class carries the process exit code the command-line entry point
maps it to.
"""


class PartPoolError(Exception):
    exit_code = 1


class ConfigError(PartPoolError, ValueError):
    """Shapes, sizes or settings are inconsistent."""

    exit_code = 2


class DataError(PartPoolError, ValueError):
    """Annotations, labels or files on disk are malformed."""

    exit_code = 3


class NumericError(PartPoolError, FloatingPointError):
    """A forward or backward pass produced NaN or Inf."""

    exit_code = 4


class UsageError(PartPoolError, RuntimeError):
    """API called out of order, e.g. backward before forward."""

    exit_code = 1
