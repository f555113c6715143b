"""Tests for the in-memory reconciliation pipeline."""

import numpy as np
import pytest

from forecast_recon.errors import ConfigError
from forecast_recon.generator import generate_tree_fixture
from forecast_recon.pipeline import (
    bench_solvers,
    reconcile_datasets,
    tune_rho,
    validate_datasets,
)
from forecast_recon.solvers import SolveSettings
from forecast_recon.sparse_core import DiagonalWeights, SparseConstraintMatrix
from forecast_recon.tabular import TabularDataset

SETTINGS = SolveSettings(eps_iter=1e-10, eps_fea=1e-10)


def fixture_datasets(noise, seed=12, levels=3, n_datasets=2):
    fixture = generate_tree_fixture(
        levels=levels, branching=2, noise=noise, seed=seed, n_datasets=n_datasets
    )
    actuals = {d.name: t for d, t in zip(fixture.datasets, fixture.truths)}
    return list(fixture.datasets), actuals


class TestReconcileDatasets:
    def test_consistent_input_unchanged(self):
        datasets, _ = fixture_datasets(noise=0.0)
        outcome = reconcile_datasets(datasets, solver="dykstra", settings=SETTINGS)
        for dataset in datasets:
            np.testing.assert_allclose(
                outcome.reconciled[dataset.name],
                dataset.metrics,
                rtol=1e-10,
                atol=1e-10,
            )
        assert outcome.report.converged

    def test_noisy_input_made_feasible(self):
        datasets, actuals = fixture_datasets(noise=0.3)
        outcome = reconcile_datasets(
            datasets, solver="dykstra", settings=SETTINGS, actuals=actuals
        )
        scale = np.linalg.norm(np.concatenate([d.metrics for d in datasets]))
        assert outcome.diagnostics.constraint_residual <= 1e-8 * (1 + scale)
        assert outcome.diagnostics.negativity_norm <= 1e-10
        assert set(outcome.diagnostics.mape) == {d.name for d in datasets}

    def test_redundant_chain_filtered(self):
        datasets, _ = fixture_datasets(noise=0.1, levels=4, n_datasets=3)
        outcome = reconcile_datasets(datasets, solver="lsqr")
        assert outcome.dropped_constraints > 0
        assert any("implied" in w for w in outcome.warnings)

    def test_redundant_filter_can_be_disabled(self):
        datasets, _ = fixture_datasets(noise=0.1, levels=4, n_datasets=3)
        from forecast_recon.errors import SingularConstraintError

        with pytest.raises(SingularConstraintError):
            reconcile_datasets(
                datasets, solver="lsqr", drop_redundant_constraints=False
            )

    def test_importance_pulls_toward_heavy_dataset(self):
        datasets, _ = fixture_datasets(noise=0.4)
        heavy_first = reconcile_datasets(
            datasets,
            importance={datasets[0].name: 1e6},
            solver="lsqr",
        )
        heavy_second = reconcile_datasets(
            datasets,
            importance={datasets[1].name: 1e6},
            solver="lsqr",
        )
        first = datasets[0]
        d1_first = np.abs(
            heavy_first.reconciled[first.name] - first.metrics
        ).max()
        d1_second = np.abs(
            heavy_second.reconciled[first.name] - first.metrics
        ).max()
        assert d1_first < d1_second

    def test_unknown_solver_and_dataset_rejected(self):
        datasets, _ = fixture_datasets(noise=0.0)
        with pytest.raises(ConfigError, match="unknown solver"):
            reconcile_datasets(datasets, solver="newton")
        with pytest.raises(ConfigError, match="unknown dataset"):
            reconcile_datasets(datasets, importance={"nope": 2.0})

    def test_all_solvers_agree_on_easy_instance(self):
        datasets, _ = fixture_datasets(noise=0.1)
        results = {
            solver: reconcile_datasets(
                datasets, solver=solver, settings=SETTINGS
            ).reconciled["level2"]
            for solver in ("lsqr", "ap", "dykstra", "admm")
        }
        for solver in ("ap", "dykstra", "admm"):
            np.testing.assert_allclose(
                results[solver], results["lsqr"], rtol=1e-3, atol=1e-4,
            )


class TestTruthInformedWeighting:
    def test_reconciled_mape_no_worse_than_worst_input(self):
        # With importance set from historical accuracy (inverse squared
        # input MAPE), the pooled reconciled error stays at or below the
        # worst input dataset's error.
        def mape(predicted, actual):
            return float(np.mean(np.abs(predicted - actual) / np.abs(actual)))

        from forecast_recon.generator import generate_tree_fixture

        for seed in range(10):
            fixture = generate_tree_fixture(
                levels=4, branching=3, noise=0.35, seed=seed, n_datasets=2
            )
            datasets = list(fixture.datasets)
            actuals = {
                d.name: t for d, t in zip(fixture.datasets, fixture.truths)
            }
            input_mapes = {
                d.name: mape(d.metrics, actuals[d.name]) for d in datasets
            }
            importance = {
                name: (1.0 / max(value, 1e-6)) ** 2
                for name, value in input_mapes.items()
            }
            outcome = reconcile_datasets(
                datasets,
                importance=importance,
                solver="dykstra",
                settings=SETTINGS,
                actuals=actuals,
            )
            reconciled_all = np.concatenate(
                [outcome.reconciled[d.name] for d in datasets]
            )
            actual_all = np.concatenate([actuals[d.name] for d in datasets])
            assert mape(reconciled_all, actual_all) <= max(
                input_mapes.values()
            ) + 1e-9


class TestValidateDatasets:
    def test_clean_fixture_exit_zero(self):
        datasets, _ = fixture_datasets(noise=0.2)
        issues, code = validate_datasets(datasets)
        assert issues == []
        assert code == 0

    def test_duplicate_tuple_is_error(self):
        bad = TabularDataset(
            name="bad",
            dimension_columns=("a",),
            metric_column="m",
            dimension_rows=(("x",), ("x",)),
            metrics=np.array([1.0, 2.0]),
        )
        issues, code = validate_datasets([bad])
        assert code == 2
        assert any(i.severity == "error" for i in issues)

    def test_unbridged_pair_warns(self):
        d1 = TabularDataset("one", ("a",), "m", (("x",),), np.array([1.0]))
        d2 = TabularDataset("two", ("b",), "m", (("y",),), np.array([1.0]))
        issues, code = validate_datasets([d1, d2])
        assert any("share no dimension columns" in i.message for i in issues)
        assert code == 0
        _, strict_code = validate_datasets([d1, d2], strict=True)
        assert strict_code == 1

    def test_one_sided_key_warns(self):
        d1 = TabularDataset("one", ("a",), "m", (("x",), ("y",)), np.array([1.0, 2.0]))
        d2 = TabularDataset("two", ("a",), "m", (("x",),), np.array([1.0]))
        issues, _ = validate_datasets([d1, d2])
        assert any("appears in" in i.message for i in issues)


class TestBench:
    def test_rows_cover_solvers_and_sizes(self):
        rows = bench_solvers([100], seed=2, solvers=("lsqr", "dykstra"))
        assert len(rows) == 2
        assert {r.solver for r in rows} == {"lsqr", "dykstra"}
        assert all(r.converged for r in rows)

    def test_accuracy_columns_deterministic(self):
        a = bench_solvers([100], seed=3, solvers=("lsqr", "ap"))
        b = bench_solvers([100], seed=3, solvers=("lsqr", "ap"))
        for ra, rb in zip(a, b):
            assert ra.relative_change == rb.relative_change
            assert ra.negativity_norm == rb.negativity_norm
            assert ra.iterations == rb.iterations

    def test_memory_budget_refusal(self):
        with pytest.raises(ConfigError, match="budget"):
            bench_solvers([10**7], memory_budget_mb=1)


class TestTuneRho:
    def test_sweep_reports_iteration_counts(self):
        datasets, _ = fixture_datasets(noise=0.2)
        outcome = reconcile_datasets(datasets, solver="lsqr")
        A = outcome.build.A
        from forecast_recon.weighting import WeightSpec, build_weights

        W = build_weights(WeightSpec(scale_mode="reciprocal_squared"), outcome.build.yhat)
        results = tune_rho(
            A, W, outcome.build.yhat, SolveSettings(), grid=(0.001, 0.1)
        )
        assert [r[0] for r in results] == [0.001, 0.1]
        assert all(isinstance(r[1], int) for r in results)
