"""Tests for the HTTP service endpoints."""

import numpy as np
import pytest
from fastapi.testclient import TestClient

from forecast_recon.service import app as asgi_app

client = TestClient(asgi_app)


def gen_payload(**overrides):
    body = {"levels": 3, "branching": 2, "noise": 0.2, "seed": 5, "n_datasets": 2}
    body.update(overrides)
    return client.post("/generate", json=body)


class TestHealth:
    def test_health(self):
        response = client.get("/health")
        assert response.status_code == 200
        body = response.json()
        assert body["status"] == "ok"
        assert body["version"]


class TestGenerate:
    def test_generates_datasets_with_truth(self):
        response = gen_payload(noise=0.0)
        assert response.status_code == 200
        body = response.json()
        assert body["n_items"] == 7
        assert [d["name"] for d in body["datasets"]] == ["level1", "level2"]
        for dataset in body["datasets"]:
            assert dataset["actuals_column"] == "truth"
            for row in dataset["rows"]:
                assert row["units"] == row["truth"]  # noise = 0

    def test_invalid_parameters_are_422(self):
        response = gen_payload(levels=1)
        assert response.status_code == 422


class TestReconcile:
    def _reconcile_body(self, noise=0.2, solver=None):
        datasets = gen_payload(noise=noise).json()["datasets"]
        body = {
            "datasets": datasets,
            "weighting": {"scale_mode": "reciprocal_squared", "epsilon": 1.0},
            "solver": solver
            or {"name": "dykstra", "eps_iter": 1e-9, "eps_fea": 1e-9},
        }
        return body

    def test_round_trip(self):
        body = self._reconcile_body()
        response = client.post("/reconcile", json=body)
        assert response.status_code == 200
        out = response.json()
        assert out["report"]["converged"] is True
        assert set(out["reconciled"]) == {"level1", "level2"}
        assert len(out["reconciled"]["level2"]) == 4
        assert out["diagnostics"]["constraint_residual"] <= 1e-6
        assert "level1" in out["diagnostics"]["mape"]

    def test_consistent_data_round_trips_unchanged(self):
        body = self._reconcile_body(noise=0.0)
        out = client.post("/reconcile", json=body).json()
        for dataset in body["datasets"]:
            sent = [row["units"] for row in dataset["rows"]]
            np.testing.assert_allclose(
                out["reconciled"][dataset["name"]], sent, rtol=1e-9
            )

    def test_solver_validation_is_422(self):
        body = self._reconcile_body()
        body["solver"] = {"name": "dykstra"}  # missing required tolerances
        response = client.post("/reconcile", json=body)
        assert response.status_code == 422
        assert "eps_iter" in response.json()["detail"]

    def test_single_dataset_rejected_by_schema(self):
        body = self._reconcile_body()
        body["datasets"] = body["datasets"][:1]
        response = client.post("/reconcile", json=body)
        assert response.status_code == 422

    def test_lsqr_converges_without_tolerances(self):
        body = self._reconcile_body(solver={"name": "lsqr"})
        response = client.post("/reconcile", json=body)
        assert response.status_code == 200
        assert response.json()["report"]["solver"] == "lsqr"

    def test_bad_actuals_column_is_422(self):
        body = self._reconcile_body()
        body["datasets"][0]["actuals_column"] = "nope"
        response = client.post("/reconcile", json=body)
        assert response.status_code == 422


class TestValidate:
    def test_clean(self):
        datasets = gen_payload(noise=0.1).json()["datasets"]
        response = client.post("/validate", json={"datasets": datasets})
        assert response.status_code == 200
        body = response.json()
        assert body["ok"] is True
        assert body["issues"] == []

    def test_duplicate_rows_flagged(self):
        dataset = {
            "name": "d",
            "dimension_columns": ["a"],
            "metric_column": "m",
            "rows": [{"a": "x", "m": 1.0}, {"a": "x", "m": 2.0}],
        }
        body = client.post("/validate", json={"datasets": [dataset]}).json()
        assert body["ok"] is False
        assert body["exit_code"] == 2
        assert any("duplicate" in issue["message"] for issue in body["issues"])


class TestBenchEndpoint:
    def test_small_bench(self):
        response = client.post(
            "/bench",
            json={"sizes": [100], "seed": 1, "solvers": ["lsqr", "ap"]},
        )
        assert response.status_code == 200
        rows = response.json()["rows"]
        assert [r["solver"] for r in rows] == ["lsqr", "ap"]
        assert all(r["converged"] for r in rows)

    def test_budget_refusal_is_422(self):
        response = client.post(
            "/bench", json={"sizes": [10**7], "memory_budget_mb": 1}
        )
        assert response.status_code == 422
        assert "budget" in response.json()["detail"]
