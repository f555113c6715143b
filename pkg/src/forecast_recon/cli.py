"""Command-line client for the reconciliation service.

Every subcommand builds the same request models the HTTP API accepts and
either executes them in-process (default) or posts them to a running
server (``--server http://host:port``). File handling stays on the
client: CSV ingestion, reconciled outputs, reports, and fixtures are all
read and written here.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

import numpy as np

from .errors import ConfigError, ReconciliationError
from .generator import TRUTH_COLUMN
from .service import (
    app as asgi_app,
    handle_bench,
    handle_gen,
    handle_reconcile,
    handle_validate,
)
from .service.schemas import (
    BenchRequest,
    BenchResponse,
    DatasetPayload,
    GenRequest,
    GenResponse,
    ReconcileRequest,
    ReconcileResponse,
    SolverPayload,
    ValidateRequest,
    ValidateResponse,
    WeightingPayload,
)
from .tabular import export_matrix_market, load_csv_dataset, write_reconciled_csv

MEMORY_BUDGET_ENV = "FORECAST_RECON_MEMORY_BUDGET_MB"

_ENDPOINTS = {
    "reconcile": ("/reconcile", handle_reconcile, ReconcileResponse),
    "validate": ("/validate", handle_validate, ValidateResponse),
    "generate": ("/generate", handle_gen, GenResponse),
    "bench": ("/bench", handle_bench, BenchResponse),
}


def _call(server: str | None, operation: str, request):
    """Run a request against the local handlers or a remote server."""
    path, handler, response_model = _ENDPOINTS[operation]
    if server is None:
        return handler(request)
    import httpx

    response = httpx.post(
        server.rstrip("/") + path,
        json=request.model_dump(),
        timeout=None,
    )
    if response.status_code != 200:
        try:
            detail = response.json().get("detail", response.text)
        except ValueError:
            detail = response.text
        raise ReconciliationError(f"server returned {response.status_code}: {detail}")
    return response_model.model_validate(response.json())


# -- config -----------------------------------------------------------------


def load_run_config(path: Path) -> dict:
    try:
        with open(path, "rb") as fh:
            config = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: invalid TOML: {exc}") from None
    if "datasets" not in config or len(config["datasets"]) < 2:
        raise ConfigError(f"{path}: need a [[datasets]] table with at least two entries")
    return config


def _dataset_payloads(config: dict, base_dir: Path):
    """Load each configured CSV; returns payloads plus raw rows for output."""
    payloads = []
    raw_by_name = {}
    header_by_name = {}
    for entry in config["datasets"]:
        for key in ("name", "path", "dimension_columns", "metric_column"):
            if key not in entry:
                raise ConfigError(f"dataset entry missing {key!r}: {entry}")
        path = Path(entry["path"])
        if not path.is_absolute():
            path = base_dir / path
        dataset, raw_rows = load_csv_dataset(
            path, entry["name"], entry["dimension_columns"], entry["metric_column"]
        )
        with open(path, newline="", encoding="utf-8") as fh:
            header = next(csv.reader(fh))
        payloads.append(
            DatasetPayload(
                name=entry["name"],
                dimension_columns=list(entry["dimension_columns"]),
                metric_column=entry["metric_column"],
                rows=raw_rows,
                importance=float(entry.get("importance", 1.0)),
                actuals_column=entry.get("actuals_column"),
            )
        )
        raw_by_name[entry["name"]] = raw_rows
        header_by_name[entry["name"]] = header
    return payloads, raw_by_name, header_by_name


def _solver_payload(config: dict, args) -> SolverPayload:
    settings = dict(config.get("solver_settings", {}))
    run = config.get("run", {})
    overrides = {
        "name": args.solver or run.get("solver", "dykstra"),
        "eps_iter": args.eps_iter if args.eps_iter is not None else settings.get("eps_iter"),
        "eps_fea": args.eps_fea if args.eps_fea is not None else settings.get("eps_fea"),
        "eps_abs": args.eps_abs if args.eps_abs is not None else settings.get("eps_abs", 1e-7),
        "eps_rel": args.eps_rel if args.eps_rel is not None else settings.get("eps_rel", 3e-8),
        "rho": args.rho if args.rho is not None else settings.get("rho", 1.0),
        "max_iters": args.max_iters if args.max_iters is not None else settings.get("max_iters", 100_000),
        "gram_method": args.gram_method or settings.get("gram_method", "direct"),
    }
    return SolverPayload(**overrides)


# -- subcommands --------------------------------------------------------------


def cmd_reconcile(args) -> int:
    config_path = Path(args.config)
    config = load_run_config(config_path)
    payloads, raw_by_name, header_by_name = _dataset_payloads(
        config, config_path.parent
    )
    weighting = WeightingPayload(**config.get("weighting", {}))
    solver = _solver_payload(config, args)
    run = config.get("run", {})
    request = ReconcileRequest(
        datasets=payloads,
        weighting=weighting,
        solver=solver,
        strict=bool(args.strict or run.get("strict", False)),
        drop_redundant_constraints=bool(
            run.get("drop_redundant_constraints", True)
        ),
    )

    if args.tune_rho and solver.name == "admm":
        request = request.model_copy(
            update={"solver": _tuned_solver(request, solver)}
        )

    response: ReconcileResponse = _call(args.server, "reconcile", request)

    output = config.get("output", {})
    out_dir = Path(args.out or output.get("directory", "."))
    if not out_dir.is_absolute():
        out_dir = Path.cwd() / out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    for payload in payloads:
        values = np.asarray(response.reconciled[payload.name])
        write_reconciled_csv(
            out_dir / f"{payload.name}_reconciled.csv",
            raw_by_name[payload.name],
            header_by_name[payload.name],
            values,
        )

    matrix_out = args.matrix_out or output.get("matrix_market")
    vector_out = args.vector_out or output.get("vector_csv")
    if matrix_out or vector_out:
        from .service.app import _to_dataset
        from .tabular import build_constraints_multi, write_stacked_vector_csv

        datasets = [_to_dataset(p) for p in payloads]
        build = build_constraints_multi(datasets)
        if matrix_out:
            export_matrix_market(Path(matrix_out), build.A)
        if vector_out:
            write_stacked_vector_csv(Path(vector_out), build)

    report_path = output.get("diagnostics")
    report_blob = {
        "report": response.report.model_dump(),
        "diagnostics": response.diagnostics.model_dump(),
        "warnings": response.warnings,
        "dropped_constraints": response.dropped_constraints,
        "n_constraints": response.n_constraints,
        "n_entries": response.n_entries,
    }
    if report_path:
        Path(report_path).write_text(
            json.dumps(report_blob, indent=2) + "\n", encoding="utf-8"
        )

    d = response.diagnostics
    print(f"solver={response.report.solver} converged={response.report.converged} "
          f"iterations={response.report.iterations}")
    print(f"relative_change={d.relative_change:.6g} negativity={d.negativity_norm:.6g} "
          f"constraint_residual={d.constraint_residual:.6g}")
    for name, value in sorted(d.mape.items()):
        print(f"mape[{name}]: reconciled={value:.6g} input={d.input_mape[name]:.6g}")
    for warning in response.warnings:
        print(f"warning: {warning}", file=sys.stderr)
    return 0 if response.report.converged else 3


def _tuned_solver(request: ReconcileRequest, solver: SolverPayload) -> SolverPayload:
    """Sweep the penalty locally and keep the fastest converged setting."""
    from .pipeline import tune_rho
    from .service.app import _to_dataset, _to_settings
    from .sparse_core import drop_dependent_rows
    from .tabular import build_constraints_multi
    from .weighting import WeightSpec, build_weights

    datasets = [_to_dataset(p) for p in request.datasets]
    build = build_constraints_multi(datasets, strict=request.strict)
    A = build.A
    if request.drop_redundant_constraints:
        A, _, _ = drop_dependent_rows(A)
    W = build_weights(
        WeightSpec(
            scale_mode=request.weighting.scale_mode,
            epsilon=request.weighting.epsilon,
        ),
        build.yhat,
    )
    results = tune_rho(A, W, build.yhat, _to_settings(solver))
    print("rho sweep (rho, iterations, converged):")
    for rho, iterations, converged in results:
        print(f"  {rho:>8g}  {iterations:>8d}  {converged}")
    converged_runs = [r for r in results if r[2]]
    if not converged_runs:
        return solver
    best = min(converged_runs, key=lambda r: r[1])[0]
    print(f"using rho={best}")
    return solver.model_copy(update={"rho": best})


def cmd_validate(args) -> int:
    config_path = Path(args.config)
    config = load_run_config(config_path)
    payloads, _, _ = _dataset_payloads(config, config_path.parent)
    request = ValidateRequest(
        datasets=payloads,
        strict=bool(args.strict or config.get("run", {}).get("strict", False)),
    )
    response: ValidateResponse = _call(args.server, "validate", request)
    for issue in response.issues:
        print(f"{issue.severity}: {issue.message}")
    if not response.issues:
        print("ok: no violations found")
    return response.exit_code


def cmd_gen(args) -> int:
    request = GenRequest(
        levels=args.levels,
        branching=args.branching,
        noise=args.noise,
        seed=args.seed,
        n_datasets=args.datasets,
    )
    response: GenResponse = _call(args.server, "generate", request)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    config_entries = []
    for payload in response.datasets:
        path = out_dir / f"{payload.name}.csv"
        fieldnames = list(payload.dimension_columns) + [
            payload.metric_column,
            TRUTH_COLUMN,
        ]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fieldnames)
            writer.writeheader()
            for row in payload.rows:
                writer.writerow({k: row[k] for k in fieldnames})
        config_entries.append(
            {
                "name": payload.name,
                "path": path.name,
                "dimension_columns": list(payload.dimension_columns),
                "metric_column": payload.metric_column,
                "actuals_column": TRUTH_COLUMN,
            }
        )
        print(f"wrote {path} ({len(payload.rows)} rows)")

    config_path = out_dir / "reconcile.toml"
    lines = ['[run]\nsolver = "dykstra"\n', "[weighting]\n"
             'scale_mode = "reciprocal_squared"\nepsilon = 1.0\n',
             "[solver_settings]\neps_iter = 1e-8\neps_fea = 1e-8\n"]
    for entry in config_entries:
        dims = ", ".join(f'"{c}"' for c in entry["dimension_columns"])
        lines.append(
            "[[datasets]]\n"
            f'name = "{entry["name"]}"\n'
            f'path = "{entry["path"]}"\n'
            f"dimension_columns = [{dims}]\n"
            f'metric_column = "{entry["metric_column"]}"\n'
            f'actuals_column = "{TRUTH_COLUMN}"\n'
        )
    config_path.write_text("\n".join(lines), encoding="utf-8")
    print(f"wrote {config_path}")
    return 0


def cmd_bench(args) -> int:
    budget = args.memory_budget_mb
    if budget is None:
        budget = int(os.environ.get(MEMORY_BUDGET_ENV, "4096"))
    request = BenchRequest(
        sizes=[int(s) for s in args.sizes.split(",")],
        seed=args.seed,
        noise=args.noise,
        solvers=args.solvers.split(","),
        solver_settings=SolverPayload(
            name="dykstra",
            eps_iter=args.eps_iter,
            eps_fea=args.eps_fea,
            eps_abs=args.eps_abs if args.eps_abs is not None else 1e-7,
            eps_rel=args.eps_rel if args.eps_rel is not None else 3e-8,
            rho=args.rho if args.rho is not None else 1.0,
            max_iters=args.max_iters if args.max_iters is not None else 100_000,
            gram_method=args.gram_method or "direct",
        ),
        auto_rho=args.rho is None,
        memory_budget_mb=budget,
    )
    response: BenchResponse = _call(args.server, "bench", request)

    header = (
        "size",
        "solver",
        "time_s",
        "rel_change",
        "negativity",
        "residual",
        "iterations",
        "converged",
    )
    table = [
        (
            str(r.size),
            r.solver,
            f"{r.wall_time:.3f}",
            f"{r.relative_change:.4g}",
            f"{r.negativity_norm:.4g}",
            f"{r.constraint_residual:.4g}",
            str(r.iterations),
            str(r.converged),
        )
        for r in response.rows
    ]
    widths = [max(len(h), *(len(row[i]) for row in table)) for i, h in enumerate(header)]
    lines = [
        "  ".join(h.ljust(widths[i]) for i, h in enumerate(header)),
        "  ".join("-" * w for w in widths),
    ]
    lines += ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)) for row in table]
    text = "\n".join(lines)
    print(text)

    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in table:
                writer.writerow(row)
        out.with_suffix(".txt").write_text(text + "\n", encoding="utf-8")
        print(f"wrote {out} and {out.with_suffix('.txt')}")
    return 0


def cmd_serve(args) -> int:
    try:
        import uvicorn
    except ModuleNotFoundError:
        print(
            "uvicorn is not installed; install the [server] extra to serve",
            file=sys.stderr,
        )
        return 2
    uvicorn.run(asgi_app, host=args.host, port=args.port)
    return 0


# -- argument parsing ---------------------------------------------------------


def _add_solver_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--solver", choices=["lsqr", "ap", "dykstra", "admm"])
    parser.add_argument("--eps-iter", type=float, dest="eps_iter")
    parser.add_argument("--eps-fea", type=float, dest="eps_fea")
    parser.add_argument("--eps-abs", type=float, dest="eps_abs")
    parser.add_argument("--eps-rel", type=float, dest="eps_rel")
    parser.add_argument("--rho", type=float)
    parser.add_argument("--max-iters", type=int, dest="max_iters")
    parser.add_argument(
        "--gram-method",
        choices=["direct", "cg"],
        dest="gram_method",
        help="factor the Gram system or solve it iteratively",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="forecast-recon",
        description="Reconcile overlapping forecast datasets under aggregation constraints.",
    )
    parser.add_argument(
        "--server",
        help="base URL of a running service; without it, requests run in-process",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("reconcile", help="ingest CSVs, reconcile, write outputs")
    p.add_argument("--config", required=True, help="TOML run configuration")
    p.add_argument("--out", help="output directory (default from config)")
    p.add_argument("--matrix-out", help="also export A in Matrix Market format")
    p.add_argument(
        "--vector-out", help="also export the stacked forecasts and labels as CSV"
    )
    p.add_argument("--strict", action="store_true", help="fail on one-sided group keys")
    p.add_argument(
        "--tune-rho",
        action="store_true",
        help="sweep the splitting penalty locally before an admm solve",
    )
    _add_solver_flags(p)
    p.set_defaults(func=cmd_reconcile)

    p = sub.add_parser("validate", help="check dataset assumptions without solving")
    p.add_argument("--config", required=True)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("gen", help="generate consistent or noisy CSV fixtures")
    p.add_argument("--out", required=True, help="directory for the CSV fixtures")
    p.add_argument("--levels", type=int, default=3)
    p.add_argument("--branching", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--datasets", type=int, default=2, help="how many levels to publish")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("bench", help="time all solvers across generated sizes")
    p.add_argument("--sizes", required=True, help="comma-separated entry counts")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--solvers", default="lsqr,ap,dykstra,admm")
    p.add_argument("--out", help="write the table as CSV (plus .txt) here")
    p.add_argument(
        "--memory-budget-mb",
        type=int,
        dest="memory_budget_mb",
        help=f"override the {MEMORY_BUDGET_ENV} env var (default 4096)",
    )
    _add_solver_flags(p)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ReconciliationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
