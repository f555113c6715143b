"""Tests for CSR storage, Gram factorization, and the projection kernel."""

import numpy as np
import pytest

from forecast_recon.errors import (
    DimensionMismatchError,
    SingularConstraintError,
)
from forecast_recon.sparse_core import (
    DiagonalWeights,
    ForecastVector,
    SparseConstraintMatrix,
    build_gram,
    matvec,
    project_nullspace,
    rmatvec,
)

# Two-level binary tree over items (a, b, c, d, e, f, g):
# a = b + c, b = d + e, c = f + g.
TREE_MATRIX = np.array(
    [
        [1, -1, -1, 0, 0, 0, 0],
        [0, 1, 0, -1, -1, 0, 0],
        [0, 0, 1, 0, 0, -1, -1],
    ],
    dtype=float,
)


def random_pm1_matrix(rng, k, n, density=0.4):
    """Random K x N matrix with +/-1 entries and full row rank."""
    while True:
        mask = rng.random((k, n)) < density
        signs = rng.choice([-1.0, 1.0], size=(k, n))
        dense = np.where(mask, signs, 0.0)
        if np.all(np.abs(dense).sum(axis=1) > 0) and np.linalg.matrix_rank(dense) == k:
            return dense


class TestSparseConstraintMatrix:
    def test_round_trip_dense(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        np.testing.assert_array_equal(A.to_dense(), TREE_MATRIX)
        assert A.shape == (3, 7)
        assert A.nnz == 9

    def test_from_rows_sorts_columns(self):
        A = SparseConstraintMatrix.from_rows(4, [((2, 0), (-1.0, 1.0))])
        np.testing.assert_array_equal(A.col_indices, [0, 2])
        np.testing.assert_array_equal(A.values, [1.0, -1.0])

    def test_rejects_more_rows_than_cols(self):
        with pytest.raises(DimensionMismatchError):
            SparseConstraintMatrix.from_dense(np.ones((3, 2)))

    def test_rejects_unsorted_columns(self):
        with pytest.raises(DimensionMismatchError):
            SparseConstraintMatrix(
                n_rows=1,
                n_cols=3,
                row_offsets=np.array([0, 2]),
                col_indices=np.array([2, 0]),
                values=np.array([1.0, -1.0]),
            )

    def test_rejects_explicit_zero(self):
        with pytest.raises(DimensionMismatchError):
            SparseConstraintMatrix(
                n_rows=1,
                n_cols=2,
                row_offsets=np.array([0, 2]),
                col_indices=np.array([0, 1]),
                values=np.array([1.0, 0.0]),
            )

    def test_canonical_validator(self):
        SparseConstraintMatrix.from_dense(TREE_MATRIX).validate_canonical()
        bad = SparseConstraintMatrix.from_dense([[2.0, -1.0]])
        with pytest.raises(DimensionMismatchError):
            bad.validate_canonical()


class TestMatvec:
    def test_tree_matrix_on_consistent_vector(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        x = np.array([7.0, 3.0, 4.0, 1.0, 2.0, 1.0, 3.0])
        np.testing.assert_array_equal(matvec(A, x), np.zeros(3))

    def test_empty_row(self):
        A = SparseConstraintMatrix(
            n_rows=1,
            n_cols=5,
            row_offsets=np.array([0, 0]),
            col_indices=np.array([], dtype=np.int64),
            values=np.array([]),
        )
        np.testing.assert_array_equal(matvec(A, np.arange(5.0)), [0.0])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(11)
        dense = random_pm1_matrix(rng, 5, 12)
        A = SparseConstraintMatrix.from_dense(dense)
        x = rng.normal(size=12)
        np.testing.assert_allclose(matvec(A, x), dense @ x, rtol=1e-14)

    def test_dimension_mismatch(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        with pytest.raises(DimensionMismatchError):
            matvec(A, np.ones(6))

    def test_accepts_forecast_vector(self):
        A = SparseConstraintMatrix.from_dense([[1.0, -1.0]])
        fv = ForecastVector(np.array([2.0, 2.0]))
        np.testing.assert_array_equal(matvec(A, fv), [0.0])


class TestRmatvec:
    def test_single_row(self):
        A = SparseConstraintMatrix.from_dense([[1.0, -1.0]])
        np.testing.assert_array_equal(rmatvec(A, np.array([1.0])), [1.0, -1.0])

    def test_tree_matrix_first_row(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        np.testing.assert_array_equal(
            rmatvec(A, np.array([1.0, 0.0, 0.0])),
            [1.0, -1.0, -1.0, 0.0, 0.0, 0.0, 0.0],
        )

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(12)
        dense = random_pm1_matrix(rng, 4, 9)
        A = SparseConstraintMatrix.from_dense(dense)
        v = rng.normal(size=4)
        np.testing.assert_allclose(rmatvec(A, v), dense.T @ v, rtol=1e-14)

    def test_dimension_mismatch(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        with pytest.raises(DimensionMismatchError):
            rmatvec(A, np.ones(4))


class TestBuildGram:
    def test_identity_pattern(self):
        A = SparseConstraintMatrix.from_dense(np.eye(2))
        G = build_gram(A, DiagonalWeights.identity(2))
        b = np.array([3.0, -1.0])
        np.testing.assert_allclose(G.solve(b), b, rtol=1e-14)
        assert G.shift == 0.0

    def test_one_by_one(self):
        A = SparseConstraintMatrix.from_dense([[1.0, -1.0]])
        G = build_gram(A, DiagonalWeights.identity(2))
        np.testing.assert_allclose(G.solve(np.array([4.0])), [2.0], rtol=1e-14)

    def test_matches_dense_solve(self):
        rng = np.random.default_rng(13)
        dense = random_pm1_matrix(rng, 8, 30)
        A = SparseConstraintMatrix.from_dense(dense)
        w = rng.uniform(0.1, 10.0, size=30)
        W = DiagonalWeights(w)
        G = build_gram(A, W)
        b = rng.normal(size=8)
        expected = np.linalg.solve(dense @ np.diag(1.0 / w) @ dense.T, b)
        np.testing.assert_allclose(G.solve(b), expected, rtol=1e-8)

    def test_residual_contract(self):
        rng = np.random.default_rng(14)
        dense = random_pm1_matrix(rng, 10, 40)
        A = SparseConstraintMatrix.from_dense(dense)
        W = DiagonalWeights(rng.uniform(0.5, 2.0, size=40))
        G = build_gram(A, W)
        gram_dense = dense @ np.diag(W.inv_entries) @ dense.T
        for _ in range(5):
            b = rng.normal(size=10)
            x = G.solve(b)
            assert np.linalg.norm(gram_dense @ x - b) <= 1e-8 * np.linalg.norm(b)

    def test_duplicate_row_names_dependent_index(self):
        dense = np.array([[1.0, -1.0, 0.0], [1.0, -1.0, 0.0]])
        A = SparseConstraintMatrix.from_dense(dense)
        with pytest.raises(SingularConstraintError) as exc:
            build_gram(A, DiagonalWeights.identity(3))
        assert exc.value.row == 1

    def test_dependent_combination_named(self):
        # Row 2 = row 0 + row 1.
        dense = np.array(
            [
                [1.0, -1.0, 0.0, 0.0],
                [0.0, 1.0, -1.0, 0.0],
                [1.0, 0.0, -1.0, 0.0],
            ]
        )
        A = SparseConstraintMatrix.from_dense(dense)
        with pytest.raises(SingularConstraintError) as exc:
            build_gram(A, DiagonalWeights.identity(4))
        assert exc.value.row == 2

    def test_auto_shift_recovers(self):
        dense = np.array([[1.0, -1.0, 0.0], [1.0, -1.0, 0.0]])
        A = SparseConstraintMatrix.from_dense(dense)
        G = build_gram(A, DiagonalWeights.identity(3), shift="auto")
        assert G.shift > 0.0
        b = np.array([1.0, 1.0])
        x = G.solve(b)
        assert np.all(np.isfinite(x))

    def test_empty_row_rejected(self):
        A = SparseConstraintMatrix(
            n_rows=1,
            n_cols=3,
            row_offsets=np.array([0, 0]),
            col_indices=np.array([], dtype=np.int64),
            values=np.array([]),
        )
        with pytest.raises(DimensionMismatchError):
            build_gram(A, DiagonalWeights.identity(3))

    def test_cg_matches_direct(self):
        rng = np.random.default_rng(15)
        dense = random_pm1_matrix(rng, 6, 20)
        A = SparseConstraintMatrix.from_dense(dense)
        W = DiagonalWeights(rng.uniform(0.2, 5.0, size=20))
        b = rng.normal(size=6)
        direct = build_gram(A, W).solve(b)
        iterative = build_gram(A, W, method="cg").solve(b)
        np.testing.assert_allclose(iterative, direct, rtol=1e-8, atol=1e-10)


class TestProjectNullspace:
    def test_symmetric_averaging(self):
        A = SparseConstraintMatrix.from_dense([[1.0, -1.0]])
        W = DiagonalWeights.identity(2)
        G = build_gram(A, W)
        np.testing.assert_allclose(
            project_nullspace(A, W, G, np.array([2.0, 4.0])), [3.0, 3.0], rtol=1e-14
        )

    def test_feasible_point_fixed(self):
        A = SparseConstraintMatrix.from_dense(TREE_MATRIX)
        W = DiagonalWeights.identity(7)
        G = build_gram(A, W)
        y = np.array([7.0, 3.0, 4.0, 1.0, 2.0, 1.0, 3.0])
        np.testing.assert_allclose(project_nullspace(A, W, G, y), y, atol=1e-12)

    def test_weighted_projection_entries(self):
        # Minimizing (z - y)^T W (z - y) over {-z1 + z2 + z3 = 0} from
        # y = (10, 3, 4) with W = diag(1/10, 1/3, 1/4) lands on multiples
        # of 1/17: (140/17, 60/17, 80/17).
        A = SparseConstraintMatrix.from_dense([[-1.0, 1.0, 1.0]])
        W = DiagonalWeights(np.array([1 / 10, 1 / 3, 1 / 4]))
        G = build_gram(A, W)
        got = project_nullspace(A, W, G, np.array([10.0, 3.0, 4.0]))
        np.testing.assert_allclose(got, [140 / 17, 60 / 17, 80 / 17], rtol=1e-12)

    def test_weighted_projection_matches_dense_kkt(self):
        A = SparseConstraintMatrix.from_dense([[-1.0, 1.0, 1.0]])
        w = np.array([1 / 10, 1 / 3, 1 / 4])
        y = np.array([10.0, 3.0, 4.0])
        # Dense KKT oracle: [2W A^T; A 0] [z; lam] = [2Wy; 0].
        kkt = np.zeros((4, 4))
        kkt[:3, :3] = 2 * np.diag(w)
        kkt[:3, 3] = -1.0, 1.0, 1.0
        kkt[3, :3] = -1.0, 1.0, 1.0
        rhs = np.concatenate([2 * w * y, [0.0]])
        expected = np.linalg.solve(kkt, rhs)[:3]
        W = DiagonalWeights(w)
        got = project_nullspace(A, W, build_gram(A, W), y)
        np.testing.assert_allclose(got, expected, rtol=1e-12)


class TestProjectionProperties:
    def _random_setup(self, rng, n_max=50):
        n = int(rng.integers(4, n_max + 1))
        k = int(rng.integers(1, min(n, 8)))
        dense = random_pm1_matrix(rng, k, n)
        A = SparseConstraintMatrix.from_dense(dense)
        W = DiagonalWeights(rng.uniform(0.05, 20.0, size=n))
        return dense, A, W

    def test_idempotence(self):
        rng = np.random.default_rng(21)
        for _ in range(25):
            dense, A, W = self._random_setup(rng)
            G = build_gram(A, W)
            y = rng.normal(scale=10.0, size=A.n_cols)
            once = project_nullspace(A, W, G, y)
            twice = project_nullspace(A, W, G, once)
            np.testing.assert_allclose(
                twice, once, rtol=1e-8, atol=1e-8 * (1 + np.linalg.norm(once))
            )

    def test_feasibility(self):
        rng = np.random.default_rng(22)
        for _ in range(25):
            dense, A, W = self._random_setup(rng)
            G = build_gram(A, W)
            y = rng.normal(scale=100.0, size=A.n_cols)
            r = project_nullspace(A, W, G, y)
            assert np.linalg.norm(matvec(A, r)) <= 1e-8 * (1 + np.linalg.norm(y))

    def test_w_optimality_against_random_feasible_points(self):
        rng = np.random.default_rng(23)
        dense, A, W = self._random_setup(rng, n_max=20)
        G = build_gram(A, W)
        y = rng.normal(scale=5.0, size=A.n_cols)
        proj = project_nullspace(A, W, G, y)

        def objective(z):
            d = z - y
            return float(d @ (W.entries * d))

        best = objective(proj)
        for _ in range(100):
            z = project_nullspace(A, W, G, rng.normal(scale=5.0, size=A.n_cols))
            assert best <= objective(z) + 1e-10

    def test_matches_dense_oracle_small(self):
        rng = np.random.default_rng(24)
        for _ in range(20):
            dense, A, W = self._random_setup(rng, n_max=50)
            G = build_gram(A, W)
            y = rng.normal(scale=3.0, size=A.n_cols)
            w_inv = np.diag(W.inv_entries)
            gram = dense @ w_inv @ dense.T
            expected = y - w_inv @ dense.T @ np.linalg.solve(gram, dense @ y)
            np.testing.assert_allclose(
                project_nullspace(A, W, G, y), expected, rtol=1e-8, atol=1e-10
            )
