"""Exception types shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data problems
exit 2, numerical failures exit 3.
"""


class RiskaeError(Exception):
    """Base class for package errors."""


class ShapeError(RiskaeError):
    """Array shapes inconsistent with an operation's signature."""


class GraphError(RiskaeError):
    """Misuse of the autodiff graph (e.g. backward on a non-scalar)."""


class NonFiniteError(RiskaeError):
    """A NaN or Inf appeared where a finite value is required."""


class MaskError(RiskaeError):
    """An attention mask would block an entire softmax row."""


class DataError(RiskaeError):
    """Malformed or inconsistent input data."""


class ZeroSumError(DataError):
    """A series with zero total cannot be row-normalized."""


class PipelineError(DataError):
    """The preprocessing pipeline cannot produce a usable dataset."""


class CheckpointError(DataError):
    """A parameter checkpoint is corrupt, mis-versioned or mismatched."""


class ConfigError(RiskaeError):
    """A run configuration fails schema validation."""
