"""Sparse constrained least-squares reconciliation of forecast hierarchies."""

from .errors import (
    ConfigError,
    DatasetError,
    DimensionMismatchError,
    HierarchyError,
    ReconciliationError,
    SingularConstraintError,
    WeightDomainError,
)
from .sparse_core import (
    DiagonalWeights,
    ForecastVector,
    GramFactorization,
    SparseConstraintMatrix,
    build_gram,
    drop_dependent_rows,
    matvec,
    project_nullspace,
    rmatvec,
)

__version__ = "0.1.0"


def __getattr__(name):
    # Heavier layers import lazily so that `import forecast_recon` stays cheap.
    if name in ("hierarchy", "solvers", "tabular", "weighting", "pipeline",
                "generator", "service", "cli"):
        import importlib

        return importlib.import_module(f".{name}", __name__)
    raise AttributeError(f"module {__name__!r} has no attribute {name!r}")
