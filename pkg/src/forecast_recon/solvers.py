"""Reconciliation solvers for min (y - yhat)^T W (y - yhat) s.t. Ay = 0, y >= 0.

Four routes to a reconciled forecast vector:

* ``lsqr_closed_form`` drops the nonnegativity constraint and evaluates
  the closed-form weighted projection onto ``{Ay = 0}``.
* ``alternating_projection`` alternates an orthant clamp with the
  null-space projection; cheap and feasible by construction, but with no
  optimality guarantee.
* ``dykstra`` adds correction vectors to the alternation, converging to
  the true weighted projection onto the intersection.
* ``admm`` splits the problem into an equality-constrained quadratic
  step (solved through the KKT system with a reusable Schur-complement
  factorization), a clamp, and a scaled dual update, with the standard
  primal/dual residual stopping rule.

``brute_force_oracle`` (active-set enumeration) and
``representation_invariance_check`` exist for verification, and
``nonneg_counterexample_search`` hunts for instances where the
closed-form route goes negative under reciprocal weighting.
"""

from __future__ import annotations

import itertools
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import DimensionMismatchError, ReconciliationError, SingularConstraintError
from .sparse_core import (
    DiagonalWeights,
    ForecastVector,
    GramFactorization,
    SparseConstraintMatrix,
    as_values,
    build_gram,
    matvec,
    project_nullspace,
    rmatvec,
)

__all__ = [
    "SolveSettings",
    "SolveReport",
    "KktSolution",
    "CounterexampleInstance",
    "weighted_objective",
    "lsqr_closed_form",
    "alternating_projection",
    "dykstra",
    "admm",
    "kkt_solve",
    "brute_force_oracle",
    "representation_invariance_check",
    "nonneg_counterexample_search",
]


@dataclass(frozen=True)
class SolveSettings:
    """Tolerances and limits shared by the iterative solvers.

    ``eps_iter``/``eps_fea`` control the projection solvers and have no
    defaults: sensible values scale with ``||yhat||`` and must be chosen
    per problem (desk-scale data tolerates 1e-8-ish; very large stacked
    vectors need correspondingly larger absolute tolerances).
    ``eps_abs``/``eps_rel`` feed the combined stopping rule of the
    splitting solver, which already adapts to scale through its relative
    term.
    """

    eps_iter: float | None = None
    eps_fea: float | None = None
    eps_abs: float = 1e-7
    eps_rel: float = 3e-8
    rho: float = 1.0
    max_iters: int = 100_000
    record_history: bool = False
    gram_method: str = "direct"

    def __post_init__(self):
        for name in ("eps_iter", "eps_fea", "eps_abs", "eps_rel"):
            value = getattr(self, name)
            if value is not None and not value > 0:
                raise ReconciliationError(f"{name} must be positive, got {value!r}")
        if not self.rho > 0:
            raise ReconciliationError(f"rho must be positive, got {self.rho!r}")
        if self.max_iters < 1:
            raise ReconciliationError("max_iters must be at least 1")
        if self.gram_method not in ("direct", "cg"):
            raise ReconciliationError(
                f"gram_method must be 'direct' or 'cg', got {self.gram_method!r}"
            )

    def require_projection_tolerances(self, solver: str) -> tuple[float, float]:
        if self.eps_iter is None or self.eps_fea is None:
            raise ReconciliationError(
                f"{solver} needs explicit eps_iter and eps_fea; pick values "
                "proportional to the scale of yhat (no universal default exists)"
            )
        return self.eps_iter, self.eps_fea


@dataclass(frozen=True)
class KktSolution:
    """Primal solution and equality multipliers of a stationarity system."""

    y: np.ndarray
    lam: np.ndarray


@dataclass(frozen=True)
class SolveReport:
    """Outcome of one solver run.

    ``converged`` means the stopping criteria were met within the
    iteration cap; residual fields not tracked by a solver are None.
    """

    y: ForecastVector
    iterations: int
    objective: float
    wall_time: float
    converged: bool
    solver: str
    r_iter: float | None = None
    r_fea: float | None = None
    r_primal: float | None = None
    r_dual: float | None = None
    history: tuple | None = None


def weighted_objective(y, yhat, W: DiagonalWeights) -> float:
    """The reconciliation objective (y - yhat)^T W (y - yhat)."""
    d = as_values(y) - as_values(yhat)
    return float(d @ (W.entries * d))


def _labels(yhat) -> tuple | None:
    return yhat.labels if isinstance(yhat, ForecastVector) else None


def _negative_norm(y: np.ndarray) -> float:
    return float(np.linalg.norm(np.minimum(y, 0.0)))


def lsqr_closed_form(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    yhat,
    gram: GramFactorization | None = None,
) -> KktSolution:
    """Closed-form minimizer over the equality constraints alone.

    Returns ``y = yhat - W^-1 A^T lam`` with
    ``lam = (A W^-1 A^T)^-1 A yhat``, which satisfies the stationarity
    system ``W y + A^T lam = W yhat``, ``A y = 0``.
    """
    values = as_values(yhat)
    G = gram if gram is not None else build_gram(A, W)
    lam = G.solve(matvec(A, values))
    y = values - W.inv_entries * rmatvec(A, lam)
    return KktSolution(y=y, lam=lam)


def kkt_solve(
    H,
    A: SparseConstraintMatrix,
    c,
    gram: GramFactorization | None = None,
) -> KktSolution:
    """Solve ``[[H, A^T], [A, 0]] [y; lam] = [-c; 0]`` for diagonal positive H.

    Eliminates ``y`` through the Schur complement ``A H^-1 A^T`` instead
    of forming the block matrix, so one Gram factorization covers any
    number of right-hand sides.
    """
    weights = H if isinstance(H, DiagonalWeights) else DiagonalWeights(as_values(H))
    c = as_values(c)
    if c.shape != (A.n_cols,):
        raise DimensionMismatchError(f"c has shape {c.shape}, expected ({A.n_cols},)")
    G = gram if gram is not None else build_gram(A, weights)
    h_inv_neg_c = weights.inv_entries * (-c)
    lam = G.solve(matvec(A, h_inv_neg_c))
    y = h_inv_neg_c - weights.inv_entries * rmatvec(A, lam)
    return KktSolution(y=y, lam=lam)


def alternating_projection(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    yhat,
    settings: SolveSettings,
    gram: GramFactorization | None = None,
) -> SolveReport:
    """Alternate the orthant clamp with the null-space projection.

    The projection comes last within each iteration, so every iterate
    satisfies ``Ay = 0`` and only the orthant violation ``||(y)_-||`` is
    monitored as the feasibility residual. Feasible by construction,
    but the limit need not be the constrained optimum.
    """
    eps_iter, eps_fea = settings.require_projection_tolerances("alternating_projection")
    start = time.perf_counter()
    values = as_values(yhat)
    G = gram if gram is not None else build_gram(A, W, method=settings.gram_method)

    y = values.copy()
    history: list[tuple[float, float]] = []
    converged = False
    r_iter = r_fea = np.inf
    iterations = 0
    for _ in range(settings.max_iters):
        y_prev = y
        y = project_nullspace(A, W, G, np.maximum(y, 0.0))
        iterations += 1
        r_iter = float(np.linalg.norm(y - y_prev))
        r_fea = _negative_norm(y)
        if settings.record_history:
            history.append((r_iter, r_fea))
        if r_iter <= eps_iter and r_fea <= eps_fea:
            converged = True
            break

    return SolveReport(
        y=ForecastVector(y, _labels(yhat)),
        iterations=iterations,
        objective=weighted_objective(y, values, W),
        wall_time=time.perf_counter() - start,
        converged=converged,
        solver="alternating_projection",
        r_iter=r_iter,
        r_fea=r_fea,
        history=tuple(history) if settings.record_history else None,
    )


def dykstra(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    yhat,
    settings: SolveSettings,
    gram: GramFactorization | None = None,
) -> SolveReport:
    """Alternating projections with correction vectors.

    Converges to the true W-weighted projection of ``yhat`` onto
    ``{Ay = 0} ∩ {y >= 0}``. Because W is diagonal, the W-metric
    projection onto the orthant separates per coordinate and reduces to
    the plain clamp ``(u)_+``, so the clamp below is exact in the
    weighted metric, not an approximation.
    """
    eps_iter, eps_fea = settings.require_projection_tolerances("dykstra")
    start = time.perf_counter()
    values = as_values(yhat)
    G = gram if gram is not None else build_gram(A, W, method=settings.gram_method)

    y = values.copy()
    p = np.zeros_like(y)
    q = np.zeros_like(y)
    history: list[tuple[float, float]] = []
    converged = False
    r_iter = r_fea = np.inf
    iterations = 0
    for _ in range(settings.max_iters):
        y_prev = y
        u = y + p
        clamped = np.maximum(u, 0.0)
        p = u - clamped
        v = clamped + q
        y = project_nullspace(A, W, G, v)
        # The null-space projector is linear, so the q correction never
        # influences the next projection (its image under the projector
        # is zero). It is updated anyway to keep the correction scheme
        # intact and the invariants inspectable.
        q = v - y
        iterations += 1
        r_iter = float(np.linalg.norm(y - y_prev))
        r_fea = _negative_norm(y)
        if settings.record_history:
            history.append((r_iter, r_fea))
        if r_iter <= eps_iter and r_fea <= eps_fea:
            converged = True
            break

    return SolveReport(
        y=ForecastVector(y, _labels(yhat)),
        iterations=iterations,
        objective=weighted_objective(y, values, W),
        wall_time=time.perf_counter() - start,
        converged=converged,
        solver="dykstra",
        r_iter=r_iter,
        r_fea=r_fea,
        history=tuple(history) if settings.record_history else None,
    )


def admm(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    yhat,
    settings: SolveSettings,
) -> SolveReport:
    """Operator splitting with an equality-constrained quadratic y-step.

    The y-update minimizes the augmented objective subject to ``Ay = 0``
    via the KKT system with ``H = 2W + rho*I`` and
    ``c = -2W yhat + rho(u - z)``; the z-update clamps ``y + u`` to the
    orthant and the scaled dual ``u`` accumulates the gap. Stops when the
    primal residual ``||y - z||`` and dual residual ``||rho (z - z_prev)||``
    fall below ``sqrt(n) eps_abs + eps_rel * scale``.
    """
    start = time.perf_counter()
    values = as_values(yhat)
    n = values.shape[0]
    rho = settings.rho

    H = DiagonalWeights(2.0 * W.entries + rho)
    G = build_gram(A, H, method=settings.gram_method)
    two_w_yhat = 2.0 * W.entries * values
    sqrt_n = np.sqrt(n)

    z = values.copy()
    u = np.zeros_like(values)
    y = values.copy()
    history: list[tuple[float, float]] = []
    converged = False
    r_primal = r_dual = np.inf
    iterations = 0
    for _ in range(settings.max_iters):
        c = -two_w_yhat + rho * (u - z)
        y = kkt_solve(H, A, c, gram=G).y
        z_prev = z
        z = np.maximum(y + u, 0.0)
        u = u + y - z
        iterations += 1
        r_primal = float(np.linalg.norm(y - z))
        r_dual = float(np.linalg.norm(rho * (z - z_prev)))
        eps_primal = sqrt_n * settings.eps_abs + settings.eps_rel * max(
            np.linalg.norm(y), np.linalg.norm(z)
        )
        eps_dual = sqrt_n * settings.eps_abs + settings.eps_rel * np.linalg.norm(
            rho * u
        )
        if settings.record_history:
            history.append((r_primal, r_dual))
        if r_primal <= eps_primal and r_dual <= eps_dual:
            converged = True
            break

    return SolveReport(
        y=ForecastVector(y, _labels(yhat)),
        iterations=iterations,
        objective=weighted_objective(y, values, W),
        wall_time=time.perf_counter() - start,
        converged=converged,
        solver="admm",
        r_primal=r_primal,
        r_dual=r_dual,
        history=tuple(history) if settings.record_history else None,
    )


_ORACLE_MAX_N = 24


def brute_force_oracle(
    A: SparseConstraintMatrix,
    W: DiagonalWeights,
    yhat,
    tol: float = 1e-9,
) -> np.ndarray:
    """Global optimum by enumerating active sets; desk-scale sizes only.

    For each candidate zero-set S, solves the equality-constrained
    problem restricted to the free entries and keeps the candidate iff
    it is primal feasible. A candidate with unique, nonnegative
    inequality multipliers certifies optimality, which ends the scan
    early (the problem is strictly convex, so such a point is the unique
    optimum). Should no candidate certify, the feasible candidate of
    minimal objective is returned, which equals the optimum because the
    optimum's own active set appears in the enumeration.

    Candidates are visited by growing |S| and processed in batches:
    the free-set Gram matrix is a rank-|S| downdate of the full Gram,
    so the batch is assembled with outer-product sums and solved with a
    vectorized SVD (which also flags the singular systems that cannot
    certify).
    """
    values = as_values(yhat)
    n = values.shape[0]
    if n > _ORACLE_MAX_N:
        raise ReconciliationError(
            f"brute-force oracle supports at most {_ORACLE_MAX_N} entries, got {n}"
        )
    if A.n_rows == 0:
        return np.maximum(values, 0.0)
    dense = A.to_dense()
    w = W.entries
    k = dense.shape[0]
    feas_tol = tol * (1.0 + float(np.abs(values).max(initial=0.0)))
    resid_tol = feas_tol * (1.0 + float(np.abs(values).sum()))
    dual_scale = tol * (1.0 + float(np.abs(2.0 * w * values).max(initial=0.0)))

    # Rank-one pieces: gram(S) = gram_full - sum_{j in S} outer[j], and
    # rhs(S) = rhs_full - sum_{j in S} col_contrib[:, j].
    cols = dense.T  # (n, k)
    outer = cols[:, :, None] * cols[:, None, :] / w[:, None, None]
    gram_full = dense @ (dense / w).T
    rhs_full = dense @ values
    col_contrib = (dense * values).T  # (n, k)

    best_y: np.ndarray | None = None
    best_obj = np.inf
    chunk_size = 4096

    for size in range(n + 1):
        combos = itertools.combinations(range(n), size)
        while True:
            block = list(itertools.islice(combos, chunk_size))
            if not block:
                break
            idx = np.asarray(block, dtype=np.int64).reshape(len(block), size)
            gram_b = gram_full[None] - outer[idx].sum(axis=1)
            rhs_b = rhs_full[None] - col_contrib[idx].sum(axis=1)

            u, s, vt = np.linalg.svd(gram_b)
            s_max = s[:, :1]
            keep = s > 1e-12 * np.maximum(s_max, 1e-300)
            full_rank = keep.all(axis=1)
            inv_s = np.where(keep, 1.0 / np.where(keep, s, 1.0), 0.0)
            # Min-norm solution; exact for the (always consistent) system.
            lam_b = np.einsum(
                "bij,bj->bi", np.transpose(vt, (0, 2, 1)), inv_s * np.einsum(
                    "bij,bi->bj", u, rhs_b
                )
            )

            y_b = values[None] - (lam_b @ dense) / w[None]
            if size:
                np.put_along_axis(y_b, idx, 0.0, axis=1)
            primal_ok = y_b.min(axis=1) >= -feas_tol

            for b in np.flatnonzero(primal_ok):
                y = y_b[b]
                if np.abs(dense @ y).max(initial=0.0) > resid_tol:
                    continue
                obj = float((y - values) @ (w * (y - values)))
                if obj < best_obj:
                    best_obj = obj
                    best_y = y.copy()
                certified = bool(full_rank[b])
                if certified and size:
                    zero_idx = idx[b]
                    mu = -2.0 * w[zero_idx] * values[zero_idx] + dense[
                        :, zero_idx
                    ].T @ (2.0 * lam_b[b])
                    certified = bool(np.min(mu, initial=0.0) >= -dual_scale)
                if certified:
                    return y.copy()

    if best_y is None:
        raise ReconciliationError("active-set enumeration found no feasible candidate")
    return best_y


def representation_invariance_check(
    A: SparseConstraintMatrix,
    E: np.ndarray,
    W: DiagonalWeights,
    yhat,
    rtol: float = 1e-8,
) -> bool:
    """Whether the closed-form solution is unchanged by the row transform E.

    Replacing ``A`` with ``E A`` for invertible ``E`` leaves the
    equality-constrained minimizer fixed; this evaluates both routes and
    compares elementwise.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.shape != (A.n_rows, A.n_rows):
        raise DimensionMismatchError(
            f"E has shape {E.shape}, expected ({A.n_rows}, {A.n_rows})"
        )
    try:
        np.linalg.solve(E, np.eye(A.n_rows))
    except np.linalg.LinAlgError:
        raise SingularConstraintError("row transform E is singular") from None

    transformed = SparseConstraintMatrix.from_dense(E @ A.to_dense())
    base = lsqr_closed_form(A, W, yhat).y
    other = lsqr_closed_form(transformed, W, yhat).y
    scale = 1.0 + np.abs(base)
    return bool(np.all(np.abs(base - other) <= rtol * scale))


@dataclass(frozen=True)
class CounterexampleInstance:
    """A reciprocal-weighted instance whose closed-form solution goes negative."""

    a_dense: np.ndarray
    yhat: np.ndarray
    y: np.ndarray
    min_entry: float
    trial: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "a_dense": self.a_dense.tolist(),
            "yhat": self.yhat.tolist(),
            "y": self.y.tolist(),
            "min_entry": self.min_entry,
            "trial": self.trial,
            "seed": self.seed,
        }


def _sample_overlapping(rng) -> np.ndarray:
    """Random aggregation matrix whose rows share columns with mixed signs.

    Two aggregate items whose child sets overlap (so some children carry
    a -1 in both rows; the structure is not a tree), optionally stacked
    under a third aggregate that sums the first two. These are exactly
    the grouped, overlapping constraint patterns under which reciprocal
    weighting stops guaranteeing a nonnegative closed-form solution.
    """
    n_shared = int(rng.integers(1, 4))
    n_only = [int(rng.integers(1, 4)), int(rng.integers(1, 4))]
    n = 2 + n_shared + n_only[0] + n_only[1]
    add_top = bool(rng.integers(0, 2))
    rows = np.zeros((3 if add_top else 2, n + (1 if add_top else 0)))
    first = 1 if add_top else 0
    p0, p1 = first + 0, first + 1  # the two overlapping aggregates
    rows[0, p0] = 1.0
    rows[1, p1] = 1.0
    col = first + 2
    rows[0, col : col + n_shared] = -1.0
    rows[1, col : col + n_shared] = -1.0
    col += n_shared
    rows[0, col : col + n_only[0]] = -1.0
    col += n_only[0]
    rows[1, col : col + n_only[1]] = -1.0
    if add_top:
        rows[2, 0] = 1.0
        rows[2, p0] = -1.0
        rows[2, p1] = -1.0
    return rows


def _sample_disjoint(rng) -> np.ndarray:
    """Random matrix whose rows have disjoint supports (one level of sums)."""
    k = int(rng.integers(1, 4))
    widths = [int(rng.integers(2, 5)) for _ in range(k)]
    n = sum(widths)
    rows = np.zeros((k, n))
    col = 0
    for i, width in enumerate(widths):
        rows[i, col] = 1.0
        rows[i, col + 1 : col + width] = -1.0
        col += width
    return rows


def nonneg_counterexample_search(
    seed: int,
    trials: int,
    family: str = "overlapping",
) -> CounterexampleInstance | None:
    """Search for a negative entry in the reciprocal-weighted closed form.

    Draws random instances with ``W = diag(1/yhat)`` and skewed positive
    forecasts, returning the first one whose equality-only solution dips
    negative, or ``None`` if no hit occurs within ``trials``. With rows
    of disjoint support the solution is provably nonnegative and the
    search always comes back empty; overlapping rows admit hits.
    """
    if family not in ("overlapping", "disjoint"):
        raise ReconciliationError(f"unknown search family {family!r}")
    sampler = _sample_overlapping if family == "overlapping" else _sample_disjoint
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        dense = sampler(rng)
        n = dense.shape[1]
        # Log-uniform forecasts spanning several orders of magnitude make
        # child sums overwhelm their aggregates, the regime where the
        # unconstrained solution overshoots below zero.
        yhat = np.exp(rng.uniform(np.log(0.05), np.log(500.0), size=n))
        w_inv = yhat  # W = diag(1/yhat)
        gram = dense @ (dense * w_inv).T
        try:
            lam = np.linalg.solve(gram, dense @ yhat)
        except np.linalg.LinAlgError:
            continue
        y = yhat - w_inv * (dense.T @ lam)
        min_entry = float(y.min())
        if min_entry < -1e-9 * (1.0 + float(yhat.max())):
            A = SparseConstraintMatrix.from_dense(dense)
            W = DiagonalWeights(1.0 / yhat)
            confirmed = lsqr_closed_form(A, W, yhat).y
            if float(confirmed.min()) < 0.0:
                return CounterexampleInstance(
                    a_dense=dense,
                    yhat=yhat,
                    y=confirmed,
                    min_entry=float(confirmed.min()),
                    trial=trial,
                    seed=seed,
                )
    return None
