"""Pydantic request/response models for the reconciliation service."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field

ScaleMode = Literal["none", "reciprocal", "reciprocal_squared"]
SolverName = Literal["lsqr", "ap", "dykstra", "admm"]


class DatasetPayload(BaseModel):
    """One tabular dataset, rows as plain records."""

    name: str
    dimension_columns: list[str]
    metric_column: str
    rows: list[dict[str, Any]]
    importance: float = Field(default=1.0, gt=0)
    actuals_column: str | None = None


class WeightingPayload(BaseModel):
    scale_mode: ScaleMode = "reciprocal_squared"
    epsilon: float = Field(default=1.0, ge=0)


class SolverPayload(BaseModel):
    name: SolverName = "dykstra"
    eps_iter: float | None = Field(default=None, gt=0)
    eps_fea: float | None = Field(default=None, gt=0)
    eps_abs: float = Field(default=1e-7, gt=0)
    eps_rel: float = Field(default=3e-8, gt=0)
    rho: float = Field(default=1.0, gt=0)
    max_iters: int = Field(default=100_000, ge=1)
    record_history: bool = False
    gram_method: Literal["direct", "cg"] = "direct"


class ReconcileRequest(BaseModel):
    datasets: list[DatasetPayload] = Field(min_length=2)
    weighting: WeightingPayload = WeightingPayload()
    solver: SolverPayload = SolverPayload()
    strict: bool = False
    drop_redundant_constraints: bool = True


class SolveReportPayload(BaseModel):
    solver: str
    iterations: int
    objective: float
    wall_time: float
    converged: bool
    r_iter: float | None = None
    r_fea: float | None = None
    r_primal: float | None = None
    r_dual: float | None = None


class DiagnosticsPayload(BaseModel):
    relative_change: float
    negativity_norm: float
    constraint_residual: float
    wall_time: float
    mape: dict[str, float] = {}
    input_mape: dict[str, float] = {}


class ReconcileResponse(BaseModel):
    reconciled: dict[str, list[float]]
    report: SolveReportPayload
    diagnostics: DiagnosticsPayload
    warnings: list[str]
    dropped_constraints: int
    n_constraints: int
    n_entries: int


class ValidateRequest(BaseModel):
    datasets: list[DatasetPayload] = Field(min_length=1)
    strict: bool = False


class ValidationIssuePayload(BaseModel):
    severity: Literal["error", "warning"]
    message: str


class ValidateResponse(BaseModel):
    issues: list[ValidationIssuePayload]
    exit_code: int
    ok: bool


class GenRequest(BaseModel):
    levels: int = Field(default=3, ge=2)
    branching: int = Field(default=2, ge=1)
    noise: float = Field(default=0.0, ge=0)
    seed: int = 0
    n_datasets: int = Field(default=2, ge=2)


class GenResponse(BaseModel):
    datasets: list[DatasetPayload]
    n_items: int


class BenchRequest(BaseModel):
    sizes: list[int] = Field(min_length=1)
    seed: int = 0
    noise: float = Field(default=0.1, ge=0)
    solvers: list[SolverName] = ["lsqr", "ap", "dykstra", "admm"]
    solver_settings: SolverPayload = SolverPayload()
    auto_rho: bool = True
    memory_budget_mb: int = Field(default=4096, ge=1)


class BenchRowPayload(BaseModel):
    size: int
    solver: str
    wall_time: float
    relative_change: float
    negativity_norm: float
    constraint_residual: float
    iterations: int
    converged: bool


class BenchResponse(BaseModel):
    rows: list[BenchRowPayload]


class HealthResponse(BaseModel):
    status: str
    version: str
