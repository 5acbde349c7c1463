"""Typed errors shared across the package.

The CLI maps these onto its exit codes: UsageError and ConfigError -> 1,
DataError -> 2, TrainingError -> 3.  Anything else is a bug and propagates.
"""


class FsnetError(Exception):
    """Base class for all package errors."""


class ConfigError(FsnetError):
    """Invalid configuration: bad shapes, schema violations, unknown keys."""


class UsageError(FsnetError):
    """Bad command-line invocation."""


class DataError(FsnetError):
    """Malformed or missing input data (frames, annotations, checkpoints)."""


class TrainingError(FsnetError):
    """Numeric failure during optimization (non-finite loss or gradient)."""
