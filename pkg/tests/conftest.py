"""Shared random-instance builders for the test suite."""

import numpy as np

from forecast_recon.sparse_core import DiagonalWeights, SparseConstraintMatrix
from forecast_recon.weighting import SCALE_MODES, WeightSpec, build_weights


def random_constraint_dense(rng, k, n, density=0.4):
    """Dense K x N matrix with +/-1 entries, full row rank, no empty rows."""
    while True:
        mask = rng.random((k, n)) < density
        signs = rng.choice([-1.0, 1.0], size=(k, n))
        dense = np.where(mask, signs, 0.0)
        if np.all(np.abs(dense).sum(axis=1) > 0) and np.linalg.matrix_rank(dense) == k:
            return dense


def random_disjoint_support_dense(rng, max_rows=5, max_width=6):
    """Dense matrix whose rows occupy disjoint column blocks (one +1, rest -1)."""
    k = int(rng.integers(1, max_rows + 1))
    widths = [int(rng.integers(2, max_width + 1)) for _ in range(k)]
    extra = int(rng.integers(0, 4))  # columns untouched by any constraint
    n = sum(widths) + extra
    dense = np.zeros((k, n))
    col = 0
    for i, width in enumerate(widths):
        dense[i, col] = 1.0
        dense[i, col + 1 : col + width] = -1.0
        col += width
    return dense


def random_weights(rng, yhat, scale_mode=None):
    """Weights built through a random WeightSpec over the given forecasts."""
    mode = scale_mode or rng.choice(SCALE_MODES)
    importance = rng.uniform(0.5, 50.0, size=yhat.shape[0])
    eps = float(rng.uniform(0.5, 2.0)) if mode == "reciprocal_squared" else 1.0
    return build_weights(
        WeightSpec(importance=importance, scale_mode=str(mode), epsilon=eps), yhat
    )


def random_instance(rng, n_max=20, k_max=6, scale_mode=None):
    """A (A, W, yhat) triple with mixed-sign constraints and positive forecasts."""
    n = int(rng.integers(max(4, k_max + 1), n_max + 1))
    k = int(rng.integers(1, min(k_max, n - 1) + 1))
    dense = random_constraint_dense(rng, k, n)
    yhat = rng.uniform(0.5, 60.0, size=n)
    A = SparseConstraintMatrix.from_dense(dense)
    W = random_weights(rng, yhat, scale_mode)
    return A, W, yhat


def random_tree_hierarchy(rng, max_items=40, max_depth=3):
    """Random strict tree hierarchy, built level by level with capped depth.

    The graded-weighting limit tests run at a fixed base of 1e6 against a
    fixed 1e-3 relative tolerance; the leading error term decays like
    (constant)/base where the constant grows with tree depth and the
    spread of the forecasts, so the sampler caps depth to keep a solid
    margin under that frozen tolerance.
    """
    from forecast_recon.hierarchy import Constraint, Hierarchy

    n = int(rng.integers(3, max_items + 1))
    depth = int(rng.integers(1, max_depth + 1))
    assignment = [0] + [int(rng.integers(1, depth + 1)) for _ in range(n - 1)]
    uniq = sorted(set(assignment))
    remap = {u: i for i, u in enumerate(uniq)}
    assignment = [remap[a] for a in assignment]
    by_level: dict[int, list[int]] = {}
    for idx, level in enumerate(assignment):
        by_level.setdefault(level, []).append(idx)
    children: dict[int, list[int]] = {}
    for level in range(1, max(assignment) + 1):
        for idx in by_level[level]:
            parent = int(rng.choice(by_level[level - 1]))
            children.setdefault(parent, []).append(idx)
    constraints = tuple(Constraint(p, tuple(c)) for p, c in children.items())
    return Hierarchy(items=tuple(f"n{i}" for i in range(n)), constraints=constraints)
