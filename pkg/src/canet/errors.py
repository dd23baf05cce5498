"""Exception types shared across the package.

The CLI maps these onto its documented exit codes (usage/config -> 2,
data format -> 3, numeric failure -> 4).
"""


class CanetError(Exception):
    """Base class for all package errors."""


class ShapeError(CanetError):
    """Tensor or kernel dimensions violate an operation's contract."""


class StateError(CanetError):
    """An object was used out of order (e.g. backward on a spent tape)."""


class NumericError(CanetError):
    """A computation produced or met non-finite values."""


class FormatError(CanetError):
    """An on-disk artifact (dataset, checkpoint) is malformed."""


class ConfigError(CanetError):
    """A run configuration is invalid or inconsistent."""


class UsageError(CanetError):
    """Command line arguments are invalid."""
