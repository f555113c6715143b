"""Synthetic fixtures: ground-truth trees, tabular aggregates, and big forests.

Fixture generation serves three purposes: producing CSV datasets whose
constraints are consistent by construction (noise = 0) or controllably
perturbed, benchmarking solvers across sizes, and stress-testing at
large N without going through the tabular pipeline. All randomness is
funneled through one seed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .sparse_core import SparseConstraintMatrix
from .tabular import TabularDataset

__all__ = ["GeneratedFixture", "generate_tree_fixture", "forest_instance"]

LEVEL_COLUMN = "lvl{level}"
METRIC_COLUMN = "units"
TRUTH_COLUMN = "truth"


@dataclass(frozen=True)
class GeneratedFixture:
    """Datasets cut from one ground-truth tree.

    ``datasets`` hold the (possibly noise-perturbed) metrics;
    ``truths`` the exact aggregates, aligned row by row.
    """

    datasets: tuple[TabularDataset, ...]
    truths: tuple[np.ndarray, ...]
    n_items: int
    levels: int
    branching: int


def generate_tree_fixture(
    levels: int,
    branching: int,
    noise: float,
    seed: int,
    n_datasets: int = 2,
) -> GeneratedFixture:
    """Grow a complete tree and publish overlapping aggregate datasets.

    The ground truth lives on leaf cells of a ``levels``-deep complete
    tree with the given branching factor. Dataset ``level{j}`` reports
    the exact totals of all nodes at depth j, keyed by the explicit path
    columns ``lvl0..lvlj``, and is then perturbed multiplicatively by
    ``1 + noise * uniform(-1, 1)`` per row. Datasets are emitted for the
    ``n_datasets`` deepest levels, so any two share all the path columns
    of the coarser one.
    """
    if levels < 2:
        raise ConfigError("need at least two levels to aggregate anything")
    if branching < 1:
        raise ConfigError("branching must be at least 1")
    if noise < 0:
        raise ConfigError("noise must be nonnegative")
    if not (2 <= n_datasets <= levels):
        raise ConfigError(
            f"n_datasets must be between 2 and levels={levels}, got {n_datasets}"
        )

    rng = np.random.default_rng(seed)
    n_leaves = branching ** (levels - 1)
    leaf_values = rng.uniform(1.0, 100.0, size=n_leaves)

    # Totals at depth j: consecutive leaf blocks of width branching**(levels-1-j).
    datasets = []
    truths = []
    depths = range(levels - n_datasets, levels)
    for depth in depths:
        n_nodes = branching**depth
        block = branching ** (levels - 1 - depth)
        totals = leaf_values.reshape(n_nodes, block).sum(axis=1)
        columns = tuple(LEVEL_COLUMN.format(level=j) for j in range(depth + 1))
        rows = []
        for node in range(n_nodes):
            # Path of ancestor indices from the root down to this node.
            path = []
            index = node
            for j in range(depth, -1, -1):
                path.append(f"{LEVEL_COLUMN.format(level=j)}_{index}")
                index //= branching
            rows.append(tuple(reversed(path)))
        perturbed = totals * (1.0 + noise * rng.uniform(-1.0, 1.0, size=n_nodes))
        datasets.append(
            TabularDataset(
                name=f"level{depth}",
                dimension_columns=columns,
                metric_column=METRIC_COLUMN,
                dimension_rows=tuple(rows),
                metrics=perturbed,
            )
        )
        truths.append(totals)

    n_items = sum(branching**j for j in range(levels))
    return GeneratedFixture(
        datasets=tuple(datasets),
        truths=tuple(truths),
        n_items=n_items,
        levels=levels,
        branching=branching,
    )


def forest_instance(
    n_trees: int,
    mids_per_tree: int,
    leaves_per_mid: int,
    seed: int,
    noise: float = 0.1,
) -> tuple[SparseConstraintMatrix, np.ndarray, np.ndarray]:
    """A forest of strict two-level trees, built directly in CSR form.

    Returns ``(A, yhat, truth)`` where truth satisfies ``A truth = 0``
    exactly and ``yhat`` is truth perturbed multiplicatively by the given
    noise level. Construction is vectorized so million-entry instances
    assemble in seconds; entries are laid out tree by tree as
    ``[root, mids..., leaves...]``.
    """
    if min(n_trees, mids_per_tree, leaves_per_mid) < 1:
        raise ConfigError("forest shape parameters must be positive")
    rng = np.random.default_rng(seed)

    per_tree = 1 + mids_per_tree + mids_per_tree * leaves_per_mid
    n = n_trees * per_tree
    tree_base = per_tree * np.arange(n_trees, dtype=np.int64)

    truth = np.empty(n)
    leaves = rng.uniform(1.0, 100.0, size=(n_trees, mids_per_tree, leaves_per_mid))
    mid_totals = leaves.sum(axis=2)
    root_totals = mid_totals.sum(axis=1)
    truth_view = truth.reshape(n_trees, per_tree)
    truth_view[:, 0] = root_totals
    truth_view[:, 1 : 1 + mids_per_tree] = mid_totals
    truth_view[:, 1 + mids_per_tree :] = leaves.reshape(n_trees, -1)

    # Root rows: +1 root, -1 per mid. Mid rows: +1 mid, -1 per leaf.
    root_cols = np.concatenate(
        [
            tree_base[:, None],
            tree_base[:, None] + 1 + np.arange(mids_per_tree)[None, :],
        ],
        axis=1,
    )
    root_vals = np.concatenate(
        [np.ones((n_trees, 1)), -np.ones((n_trees, mids_per_tree))], axis=1
    )
    mid_idx = tree_base[:, None] + 1 + np.arange(mids_per_tree)[None, :]
    leaf_start = (
        tree_base[:, None]
        + 1
        + mids_per_tree
        + np.arange(mids_per_tree)[None, :] * leaves_per_mid
    )
    mid_cols = np.concatenate(
        [
            mid_idx.reshape(-1, 1),
            leaf_start.reshape(-1, 1) + np.arange(leaves_per_mid)[None, :],
        ],
        axis=1,
    )
    mid_vals = np.concatenate(
        [
            np.ones((n_trees * mids_per_tree, 1)),
            -np.ones((n_trees * mids_per_tree, leaves_per_mid)),
        ],
        axis=1,
    )

    row_lengths = np.concatenate(
        [
            np.full(n_trees, 1 + mids_per_tree, dtype=np.int64),
            np.full(n_trees * mids_per_tree, 1 + leaves_per_mid, dtype=np.int64),
        ]
    )
    offsets = np.concatenate([[0], np.cumsum(row_lengths)])
    col_indices = np.concatenate([root_cols.ravel(), mid_cols.ravel()])
    values = np.concatenate([root_vals.ravel(), mid_vals.ravel()])

    A = SparseConstraintMatrix(
        n_rows=row_lengths.shape[0],
        n_cols=n,
        row_offsets=offsets,
        col_indices=col_indices,
        values=values,
    )
    yhat = truth * (1.0 + noise * rng.uniform(-1.0, 1.0, size=n))
    return A, yhat, truth
