"""Sparse constraint storage and the weighted null-space projection kernel.

Every solver in this package reduces to the same three primitives: a CSR
aggregation matrix ``A`` with entries in {-1, 0, +1}, a reusable
factorization of the small Gram system ``A W^-1 A^T``, and the projection
of a forecast vector onto the subspace ``{y : A y = 0}`` in the metric
induced by the diagonal weights ``W``. This module owns all three.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .errors import DimensionMismatchError, SingularConstraintError, WeightDomainError

__all__ = [
    "SparseConstraintMatrix",
    "DiagonalWeights",
    "ForecastVector",
    "GramFactorization",
    "matvec",
    "rmatvec",
    "build_gram",
    "project_nullspace",
    "drop_dependent_rows",
]

# Relative pivot threshold below which a Gram factorization is declared
# rank deficient.
_RANK_RTOL = 1e-12

# Largest Gram dimension for which we densify to name the offending row
# in a singularity error. Above this we raise without an index.
_DENSE_ANALYSIS_LIMIT = 2048


@dataclass(frozen=True)
class SparseConstraintMatrix:
    """Aggregation constraints ``A`` in compressed sparse row form.

    Rows are constraints, columns are forecast entries. Entries are
    expected in {-1, +1} when the matrix is in canonical form, but
    arbitrary nonzero reals are accepted (reconciliation is invariant
    under invertible row transforms). Instances are immutable after
    construction and safe to share across threads.

    Parameters
    ----------
    n_rows, n_cols : int
        Constraint count K and forecast count N, with K <= N.
    row_offsets : ndarray of int64, length K + 1
        CSR row pointer; nondecreasing, starts at 0.
    col_indices : ndarray of int64
        Column index of each stored entry; strictly increasing within
        each row.
    values : ndarray of float64
        Stored entries; explicit zeros are rejected.
    """

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _csr: sparse.csr_matrix = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        offsets = np.ascontiguousarray(self.row_offsets, dtype=np.int64)
        cols = np.ascontiguousarray(self.col_indices, dtype=np.int64)
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "row_offsets", offsets)
        object.__setattr__(self, "col_indices", cols)
        object.__setattr__(self, "values", vals)

        if self.n_rows < 0 or self.n_cols < 0:
            raise DimensionMismatchError("matrix dimensions must be nonnegative")
        if self.n_rows > self.n_cols:
            raise DimensionMismatchError(
                f"expected at least as many forecasts as constraints, "
                f"got {self.n_rows} rows x {self.n_cols} cols"
            )
        if offsets.shape != (self.n_rows + 1,):
            raise DimensionMismatchError(
                f"row_offsets must have length n_rows + 1 = {self.n_rows + 1}"
            )
        if self.n_rows > 0 and offsets[0] != 0:
            raise DimensionMismatchError("row_offsets must start at 0")
        if np.any(np.diff(offsets) < 0):
            raise DimensionMismatchError("row_offsets must be nondecreasing")
        nnz = int(offsets[-1]) if self.n_rows > 0 else 0
        if cols.shape != (nnz,) or vals.shape != (nnz,):
            raise DimensionMismatchError(
                f"col_indices/values must match row_offsets[-1] = {nnz} entries"
            )
        if nnz:
            if cols.min(initial=0) < 0 or cols.max(initial=-1) >= self.n_cols:
                raise DimensionMismatchError("column index out of range")
            # Strictly increasing within rows: every non-positive jump in the
            # concatenated index stream must land exactly on a row boundary.
            jumps = np.flatnonzero(np.diff(cols) <= 0) + 1
            boundaries = offsets[1:-1]
            if not np.isin(jumps, boundaries).all():
                raise DimensionMismatchError(
                    "column indices must be strictly increasing within each row"
                )
            if np.any(vals == 0.0):
                raise DimensionMismatchError("explicit zero entries are not allowed")

        csr = sparse.csr_matrix(
            (vals, cols, offsets), shape=(self.n_rows, self.n_cols), copy=False
        )
        object.__setattr__(self, "_csr", csr)

    # -- constructors ---------------------------------------------------

    @classmethod
    def from_dense(cls, array, tol: float = 0.0) -> "SparseConstraintMatrix":
        """Build from a dense 2-D array, dropping entries with |a| <= tol."""
        arr = np.asarray(array, dtype=np.float64)
        if arr.ndim != 2:
            raise DimensionMismatchError("expected a 2-D array")
        masked = np.where(np.abs(arr) <= tol, 0.0, arr)
        return cls.from_scipy(sparse.csr_matrix(masked))

    @classmethod
    def from_scipy(cls, matrix) -> "SparseConstraintMatrix":
        """Build from any scipy sparse matrix (converted to canonical CSR)."""
        csr = sparse.csr_matrix(matrix)
        csr.sum_duplicates()
        csr.eliminate_zeros()
        csr.sort_indices()
        return cls(
            n_rows=csr.shape[0],
            n_cols=csr.shape[1],
            row_offsets=csr.indptr.astype(np.int64),
            col_indices=csr.indices.astype(np.int64),
            values=csr.data.astype(np.float64),
        )

    @classmethod
    def from_rows(
        cls, n_cols: int, rows: Iterable[tuple[Sequence[int], Sequence[float]]]
    ) -> "SparseConstraintMatrix":
        """Build from per-row (column indices, values) pairs."""
        offsets = [0]
        cols: list[int] = []
        vals: list[float] = []
        for row_cols, row_vals in rows:
            order = np.argsort(row_cols, kind="stable")
            cols.extend(np.asarray(row_cols, dtype=np.int64)[order])
            vals.extend(np.asarray(row_vals, dtype=np.float64)[order])
            offsets.append(len(cols))
        return cls(
            n_rows=len(offsets) - 1,
            n_cols=n_cols,
            row_offsets=np.asarray(offsets, dtype=np.int64),
            col_indices=np.asarray(cols, dtype=np.int64),
            values=np.asarray(vals, dtype=np.float64),
        )

    # -- views ------------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.row_offsets[-1]) if self.n_rows else 0

    def to_scipy(self) -> sparse.csr_matrix:
        """CSR view sharing this matrix's buffers. Do not mutate."""
        return self._csr

    def to_dense(self) -> np.ndarray:
        return self._csr.toarray()

    def row(self, k: int) -> tuple[np.ndarray, np.ndarray]:
        """Column indices and values of row ``k``."""
        lo, hi = self.row_offsets[k], self.row_offsets[k + 1]
        return self.col_indices[lo:hi], self.values[lo:hi]

    def validate_canonical(self) -> None:
        """Strict-mode check that every stored entry is exactly +/-1."""
        if self.nnz and not np.all(np.abs(self.values) == 1.0):
            bad = int(np.flatnonzero(np.abs(self.values) != 1.0)[0])
            raise DimensionMismatchError(
                f"canonical form requires entries in {{-1, +1}}; "
                f"stored entry {bad} is {self.values[bad]!r}"
            )


@dataclass(frozen=True)
class DiagonalWeights:
    """Diagonal weight matrix ``W`` stored as its positive diagonal.

    The reciprocal diagonal is precomputed because every projection and
    every solver iteration multiplies by ``W^-1``.
    """

    entries: np.ndarray
    inv_entries: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        entries = np.ascontiguousarray(self.entries, dtype=np.float64)
        object.__setattr__(self, "entries", entries)
        if entries.ndim != 1:
            raise WeightDomainError("weights must form a 1-D vector")
        finite = np.isfinite(entries)
        if not finite.all():
            bad = int(np.flatnonzero(~finite)[0])
            raise WeightDomainError(f"weight {bad} is not finite: {entries[bad]!r}")
        if np.any(entries <= 0.0):
            bad = int(np.flatnonzero(entries <= 0.0)[0])
            raise WeightDomainError(f"weight {bad} is not positive: {entries[bad]!r}")
        object.__setattr__(self, "inv_entries", 1.0 / entries)

    def __len__(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def identity(cls, n: int) -> "DiagonalWeights":
        return cls(np.ones(n))


@dataclass(frozen=True)
class ForecastVector:
    """A stacked forecast vector with optional per-entry provenance.

    ``labels``, when present, carries one ``(source dataset, dimension
    key)`` record per entry and must match ``values`` in length.
    """

    values: np.ndarray
    labels: tuple | None = None

    def __post_init__(self):
        values = np.ascontiguousarray(self.values, dtype=np.float64)
        object.__setattr__(self, "values", values)
        if values.ndim != 1:
            raise DimensionMismatchError("forecast values must form a 1-D vector")
        if self.labels is not None:
            labels = tuple(self.labels)
            object.__setattr__(self, "labels", labels)
            if len(labels) != values.shape[0]:
                raise DimensionMismatchError(
                    f"{len(labels)} labels for {values.shape[0]} values"
                )

    def __len__(self) -> int:
        return self.values.shape[0]

    def __array__(self, dtype=None):
        return np.asarray(self.values, dtype=dtype)


def as_values(y) -> np.ndarray:
    """Accept a ForecastVector or any array-like; return float64 values."""
    if isinstance(y, ForecastVector):
        return y.values
    return np.ascontiguousarray(y, dtype=np.float64)


@dataclass
class GramFactorization:
    """Reusable handle for solving with the SPD matrix ``A W^-1 A^T``.

    ``shift`` records the diagonal regularization actually applied
    (0.0 when the factorization succeeded unshifted). The handle is
    read-only after construction; concurrent ``solve`` calls are safe.
    """

    dimension: int
    shift: float
    method: str
    _solve: Callable[[np.ndarray], np.ndarray]

    def solve(self, b: np.ndarray) -> np.ndarray:
        b = np.ascontiguousarray(b, dtype=np.float64)
        if b.shape != (self.dimension,):
            raise DimensionMismatchError(
                f"right-hand side has length {b.shape}, expected ({self.dimension},)"
            )
        return self._solve(b)


def matvec(A: SparseConstraintMatrix, x) -> np.ndarray:
    """Compute ``A x``; raises on length mismatch."""
    x = as_values(x)
    if x.shape != (A.n_cols,):
        raise DimensionMismatchError(
            f"x has shape {x.shape}, expected ({A.n_cols},)"
        )
    return A.to_scipy() @ x


def rmatvec(A: SparseConstraintMatrix, v) -> np.ndarray:
    """Compute ``A^T v``; raises on length mismatch."""
    v = as_values(v)
    if v.shape != (A.n_rows,):
        raise DimensionMismatchError(
            f"v has shape {v.shape}, expected ({A.n_rows},)"
        )
    return A.to_scipy().T @ v


def _first_dependent_row(gram_dense: np.ndarray) -> int | None:
    """Index of the first row whose leading Gram minor loses rank.

    Runs an unpivoted Cholesky sweep; the step at which the pivot
    collapses is exactly the first constraint row that is linearly
    dependent on the rows before it.
    """
    k_dim = gram_dense.shape[0]
    L = np.zeros_like(gram_dense)
    for k in range(k_dim):
        pivot = gram_dense[k, k] - L[k, :k] @ L[k, :k]
        if pivot <= _RANK_RTOL * abs(gram_dense[k, k]):
            return k
        L[k, k] = np.sqrt(pivot)
        if k + 1 < k_dim:
            L[k + 1 :, k] = (gram_dense[k + 1 :, k] - L[k + 1 :, :k] @ L[k, :k]) / L[k, k]
    return None


def _assemble_gram(A: SparseConstraintMatrix, W: DiagonalWeights) -> sparse.csc_matrix:
    csr = A.to_scipy()
    return (csr @ sparse.diags(W.inv_entries) @ csr.T).tocsc()


def _raise_singular(A: SparseConstraintMatrix, gram: sparse.csc_matrix) -> None:
    row = None
    if A.n_rows <= _DENSE_ANALYSIS_LIMIT:
        row = _first_dependent_row(gram.toarray())
    detail = (
        f"constraint row {row} is linearly dependent on earlier rows"
        if row is not None
        else "the constraint rows are linearly dependent"
    )
    raise SingularConstraintError(
        f"Gram matrix A W^-1 A^T is rank deficient: {detail}. "
        "Remove redundant constraints or enable a diagonal shift.",
        row=row,
    )


def build_gram(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    *,
    shift: float | str | None = None,
    method: str = "direct",
    cg_rtol: float = 1e-12,
    cg_maxiter: int | None = None,
) -> GramFactorization:
    """Factor ``A W^-1 A^T`` for repeated solves.

    Parameters
    ----------
    shift : None, "auto", or float
        Diagonal regularization applied only if rank deficiency is
        detected. ``None`` (default) fails hard; ``"auto"`` uses
        ``1e-10 * trace / K``; a float is used as given.
    method : "direct" or "cg"
        ``direct`` runs a sparse LU factorization of the (SPD) Gram
        matrix; ``cg`` keeps only the assembled matrix and solves with
        conjugate gradients, for problems where the factorization would
        be too dense.

    Raises
    ------
    SingularConstraintError
        If the Gram matrix is rank deficient and no shift is configured,
        naming the first dependent constraint row when it can be found.
    """
    if len(W) != A.n_cols:
        raise DimensionMismatchError(
            f"{len(W)} weights for a matrix with {A.n_cols} columns"
        )
    if A.n_rows == 0:
        raise DimensionMismatchError("cannot factor a Gram matrix with zero rows")
    empty_rows = np.flatnonzero(np.diff(A.row_offsets) == 0)
    if empty_rows.size:
        raise DimensionMismatchError(
            f"constraint row {int(empty_rows[0])} has no entries"
        )

    gram = _assemble_gram(A, W)
    trace = float(gram.diagonal().sum())

    if shift is None:
        shift_value = None
    elif shift == "auto":
        shift_value = 1e-10 * trace / A.n_rows
    else:
        shift_value = float(shift)
        if shift_value < 0:
            raise WeightDomainError("diagonal shift must be nonnegative")

    if method == "direct":
        return _factor_direct(A, gram, shift_value)
    if method == "cg":
        return _factor_cg(A, gram, shift_value, cg_rtol, cg_maxiter)
    raise ValueError(f"unknown Gram solve method: {method!r}")


def _equilibrate(gram: sparse.csc_matrix) -> tuple[sparse.csc_matrix, np.ndarray]:
    """Symmetric Jacobi scaling to unit diagonal.

    Graded weightings make Gram rows differ by many orders of magnitude;
    scaling keeps the rank test meaningful and the factorization stable.
    The diagonal is strictly positive because weights are positive and
    empty constraint rows are rejected upstream.
    """
    d = gram.diagonal()
    scale = 1.0 / np.sqrt(np.abs(d))
    scale[~np.isfinite(scale)] = 1.0
    D = sparse.diags(scale)
    return (D @ gram @ D).tocsc(), scale


def _try_splu(scaled_gram: sparse.csc_matrix):
    try:
        lu = splinalg.splu(scaled_gram)
    except RuntimeError:
        return None
    u_diag = np.abs(lu.U.diagonal())
    if u_diag.size and u_diag.min() <= _RANK_RTOL * max(u_diag.max(), 1.0):
        return None
    return lu


def _factor_direct(
    A: SparseConstraintMatrix, gram: sparse.csc_matrix, shift_value: float | None
) -> GramFactorization:
    scaled, scale = _equilibrate(gram)
    lu = _try_splu(scaled)
    applied = 0.0
    if lu is None:
        if shift_value is None:
            _raise_singular(A, gram)
        applied = shift_value
        shifted = (gram + shift_value * sparse.identity(A.n_rows, format="csc")).tocsc()
        scaled, scale = _equilibrate(shifted)
        lu = _try_splu(scaled)
        if lu is None:
            _raise_singular(A, gram)

    def solve(b: np.ndarray, _lu=lu, _scale=scale) -> np.ndarray:
        return _scale * _lu.solve(_scale * b)

    return GramFactorization(
        dimension=A.n_rows, shift=applied, method="direct", _solve=solve
    )


def _factor_cg(
    A: SparseConstraintMatrix,
    gram: sparse.csc_matrix,
    shift_value: float | None,
    rtol: float,
    maxiter: int | None,
) -> GramFactorization:
    # CG cannot cheaply certify rank; an explicit shift is applied up
    # front when configured, and non-convergence surfaces at solve time.
    applied = float(shift_value) if shift_value else 0.0
    op = gram if applied == 0.0 else (
        gram + applied * sparse.identity(A.n_rows, format="csc")
    )
    scaled, scale = _equilibrate(op)
    limit = maxiter if maxiter is not None else max(1000, 20 * A.n_rows)

    def solve(b: np.ndarray) -> np.ndarray:
        x, info = splinalg.cg(scaled, scale * b, rtol=rtol, atol=0.0, maxiter=limit)
        if info != 0:
            raise SingularConstraintError(
                f"conjugate gradients failed to converge (info={info}); "
                "the Gram system may be rank deficient"
            )
        return scale * x

    return GramFactorization(
        dimension=A.n_rows, shift=applied, method="cg", _solve=solve
    )


def drop_dependent_rows(
    A: SparseConstraintMatrix,
) -> tuple[SparseConstraintMatrix, np.ndarray, np.ndarray]:
    """Remove constraint rows linearly implied by earlier rows.

    For homogeneous constraints ``Ay = 0`` a dependent row adds no
    information, so dropping it leaves the feasible set (and therefore
    every reconciliation result) unchanged while restoring a factorable
    Gram matrix. Detection runs a skipping Cholesky sweep over the
    unweighted Gram; rows whose pivot collapses (including empty rows)
    are dropped. Returns the filtered matrix plus the kept and dropped
    row indices.
    """
    k_dim = A.n_rows
    if k_dim > _DENSE_ANALYSIS_LIMIT:
        raise DimensionMismatchError(
            f"dependent-row filtering densifies the Gram matrix and is "
            f"limited to {_DENSE_ANALYSIS_LIMIT} rows, got {k_dim}; "
            "deduplicate constraints upstream or enable a diagonal shift"
        )
    csr = A.to_scipy()
    gram = (csr @ csr.T).toarray()
    factors = np.zeros((k_dim, k_dim))
    kept: list[int] = []
    m = 0
    for k in range(k_dim):
        pivot = gram[k, k] - factors[k, :m] @ factors[k, :m]
        if pivot <= _RANK_RTOL * max(abs(gram[k, k]), 1e-300):
            continue
        factors[:, m] = (gram[:, k] - factors[:, :m] @ factors[k, :m]) / np.sqrt(pivot)
        kept.append(k)
        m += 1
    kept_idx = np.asarray(kept, dtype=np.int64)
    dropped_idx = np.setdiff1d(np.arange(k_dim), kept_idx)
    if dropped_idx.size == 0:
        return A, kept_idx, dropped_idx
    filtered = SparseConstraintMatrix.from_rows(
        A.n_cols, [A.row(int(k)) for k in kept_idx]
    )
    return filtered, kept_idx, dropped_idx


def project_nullspace(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    G: GramFactorization,
    y,
) -> np.ndarray:
    """W-metric projection of ``y`` onto the subspace ``{x : A x = 0}``.

    Returns ``y - W^-1 A^T G.solve(A y)``, the point of the null space
    nearest to ``y`` in the metric induced by ``W``. Idempotent, and the
    result satisfies ``A r = 0`` up to the factorization's accuracy.
    """
    y = as_values(y)
    if y.shape != (A.n_cols,):
        raise DimensionMismatchError(
            f"y has shape {y.shape}, expected ({A.n_cols},)"
        )
    residual = matvec(A, y)
    return y - W.inv_entries * rmatvec(A, G.solve(residual))
