"""Exception types shared across the package."""


class ReconciliationError(Exception):
    """Base class for every error raised by this package."""


class DimensionMismatchError(ReconciliationError, ValueError):
    """Vector or matrix dimensions do not line up."""


class SingularConstraintError(ReconciliationError, ValueError):
    """The constraint Gram system is (numerically) rank deficient.

    ``row`` is the index of the first constraint row that is linearly
    dependent on the rows before it, or ``None`` when the offending row
    could not be pinned down (e.g. the system was too large to analyze).
    """

    def __init__(self, message: str, row: int | None = None):
        super().__init__(message)
        self.row = row


class WeightDomainError(ReconciliationError, ValueError):
    """A weight came out nonpositive, nonfinite, or was built from bad inputs."""


class HierarchyError(ReconciliationError, ValueError):
    """An item hierarchy violates the tree-based structural rules."""


class DatasetError(ReconciliationError, ValueError):
    """A tabular forecast dataset violates its schema assumptions."""


class ConfigError(ReconciliationError, ValueError):
    """A run configuration is malformed or references missing files."""
