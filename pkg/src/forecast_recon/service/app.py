"""FastAPI service wrapping the reconciliation pipeline.

The handler functions do the payload/core conversion and are plain
callables, so the command-line client can run them in-process with the
exact models the HTTP routes use.
"""

from __future__ import annotations

import numpy as np
from fastapi import FastAPI, HTTPException

from .. import __version__
from ..errors import ReconciliationError
from ..generator import TRUTH_COLUMN, generate_tree_fixture
from ..pipeline import bench_solvers, reconcile_datasets, validate_datasets
from ..solvers import SolveSettings
from ..tabular import TabularDataset
from .schemas import (
    BenchRequest,
    BenchResponse,
    BenchRowPayload,
    DatasetPayload,
    DiagnosticsPayload,
    GenRequest,
    GenResponse,
    HealthResponse,
    ReconcileRequest,
    ReconcileResponse,
    SolveReportPayload,
    ValidateRequest,
    ValidateResponse,
    ValidationIssuePayload,
)

__all__ = [
    "app",
    "handle_reconcile",
    "handle_validate",
    "handle_gen",
    "handle_bench",
]


def _to_dataset(payload: DatasetPayload) -> TabularDataset:
    return TabularDataset.from_records(
        payload.name,
        payload.dimension_columns,
        payload.metric_column,
        payload.rows,
    )


def _to_settings(payload) -> SolveSettings:
    return SolveSettings(
        eps_iter=payload.eps_iter,
        eps_fea=payload.eps_fea,
        eps_abs=payload.eps_abs,
        eps_rel=payload.eps_rel,
        rho=payload.rho,
        max_iters=payload.max_iters,
        record_history=payload.record_history,
        gram_method=payload.gram_method,
    )


def handle_reconcile(request: ReconcileRequest) -> ReconcileResponse:
    datasets = [_to_dataset(p) for p in request.datasets]
    importance = {p.name: p.importance for p in request.datasets}
    actuals = {}
    for payload in request.datasets:
        if payload.actuals_column is None:
            continue
        try:
            actuals[payload.name] = np.array(
                [float(row[payload.actuals_column]) for row in payload.rows]
            )
        except KeyError:
            raise ReconciliationError(
                f"dataset {payload.name!r} has no column "
                f"{payload.actuals_column!r} for actuals"
            ) from None

    outcome = reconcile_datasets(
        datasets,
        importance=importance,
        scale_mode=request.weighting.scale_mode,
        epsilon=request.weighting.epsilon,
        solver=request.solver.name,
        settings=_to_settings(request.solver),
        strict=request.strict,
        drop_redundant_constraints=request.drop_redundant_constraints,
        actuals=actuals or None,
    )
    report = outcome.report
    return ReconcileResponse(
        reconciled={name: list(map(float, v)) for name, v in outcome.reconciled.items()},
        report=SolveReportPayload(
            solver=report.solver,
            iterations=report.iterations,
            objective=report.objective,
            wall_time=report.wall_time,
            converged=report.converged,
            r_iter=report.r_iter,
            r_fea=report.r_fea,
            r_primal=report.r_primal,
            r_dual=report.r_dual,
        ),
        diagnostics=DiagnosticsPayload(
            relative_change=outcome.diagnostics.relative_change,
            negativity_norm=outcome.diagnostics.negativity_norm,
            constraint_residual=outcome.diagnostics.constraint_residual,
            wall_time=outcome.diagnostics.wall_time,
            mape=outcome.diagnostics.mape,
            input_mape=outcome.diagnostics.input_mape,
        ),
        warnings=list(outcome.warnings),
        dropped_constraints=outcome.dropped_constraints,
        n_constraints=outcome.build.A.n_rows - outcome.dropped_constraints,
        n_entries=len(outcome.build.yhat),
    )


def handle_validate(request: ValidateRequest) -> ValidateResponse:
    datasets = [_to_dataset(p) for p in request.datasets]
    issues, exit_code = validate_datasets(datasets, strict=request.strict)
    return ValidateResponse(
        issues=[
            ValidationIssuePayload(severity=i.severity, message=i.message)
            for i in issues
        ],
        exit_code=exit_code,
        ok=exit_code == 0,
    )


def handle_gen(request: GenRequest) -> GenResponse:
    fixture = generate_tree_fixture(
        levels=request.levels,
        branching=request.branching,
        noise=request.noise,
        seed=request.seed,
        n_datasets=request.n_datasets,
    )
    payloads = []
    for dataset, truth in zip(fixture.datasets, fixture.truths):
        rows = []
        for labels, metric, actual in zip(
            dataset.dimension_rows, dataset.metrics, truth
        ):
            row = dict(zip(dataset.dimension_columns, labels))
            row[dataset.metric_column] = float(metric)
            row[TRUTH_COLUMN] = float(actual)
            rows.append(row)
        payloads.append(
            DatasetPayload(
                name=dataset.name,
                dimension_columns=list(dataset.dimension_columns),
                metric_column=dataset.metric_column,
                rows=rows,
                actuals_column=TRUTH_COLUMN,
            )
        )
    return GenResponse(datasets=payloads, n_items=fixture.n_items)


def handle_bench(request: BenchRequest) -> BenchResponse:
    rows = bench_solvers(
        request.sizes,
        seed=request.seed,
        noise=request.noise,
        solvers=tuple(request.solvers),
        settings=_to_settings(request.solver_settings),
        auto_rho=request.auto_rho,
        memory_budget_mb=request.memory_budget_mb,
    )
    return BenchResponse(
        rows=[
            BenchRowPayload(
                size=r.size,
                solver=r.solver,
                wall_time=r.wall_time,
                relative_change=r.relative_change,
                negativity_norm=r.negativity_norm,
                constraint_residual=r.constraint_residual,
                iterations=r.iterations,
                converged=r.converged,
            )
            for r in rows
        ]
    )


app = FastAPI(
    title="forecast-recon",
    version=__version__,
    description=(
        "Reconcile overlapping forecast datasets under aggregation "
        "consistency and nonnegativity constraints."
    ),
)


@app.get("/health", response_model=HealthResponse)
def health() -> HealthResponse:
    return HealthResponse(status="ok", version=__version__)


@app.post("/reconcile", response_model=ReconcileResponse)
def reconcile(request: ReconcileRequest) -> ReconcileResponse:
    try:
        return handle_reconcile(request)
    except ReconciliationError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.post("/validate", response_model=ValidateResponse)
def validate(request: ValidateRequest) -> ValidateResponse:
    try:
        return handle_validate(request)
    except ReconciliationError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.post("/generate", response_model=GenResponse)
def generate(request: GenRequest) -> GenResponse:
    try:
        return handle_gen(request)
    except ReconciliationError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc


@app.post("/bench", response_model=BenchResponse)
def bench(request: BenchRequest) -> BenchResponse:
    try:
        return handle_bench(request)
    except ReconciliationError as exc:
        raise HTTPException(status_code=422, detail=str(exc)) from exc
