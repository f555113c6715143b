"""Tree-based item hierarchies and their reference reconcilers.

A hierarchy is a set of aggregation constraints "parent = sum of
children" over labeled items, where each item is a child in at most one
constraint. Such a hierarchy has a canonical full-row-rank aggregation
matrix (+1 on the parent, -1 on each child, rows ordered by decreasing
parent height), exponential depth- or height-graded weightings, and two
closed-form reference reconcilers: share-based disaggregation from the
top and bottom-up summation from the leaves. The reference reconcilers
double as oracles for the weighted-least-squares limits exercised in the
test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import HierarchyError
from .sparse_core import DiagonalWeights, ForecastVector, SparseConstraintMatrix, as_values

__all__ = [
    "Constraint",
    "Hierarchy",
    "DepthHeightTable",
    "compute_depth_height",
    "canonical_matrix",
    "heavy_weights",
    "share_based_disaggregate",
    "bottom_up_aggregate",
    "load_edge_list",
]


@dataclass(frozen=True)
class Constraint:
    """One aggregation record: ``items[parent] = sum over items[children]``."""

    parent: int
    children: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "children", tuple(int(c) for c in self.children))
        object.__setattr__(self, "parent", int(self.parent))
        if not self.children:
            raise HierarchyError(f"constraint on parent {self.parent} has no children")
        if len(set(self.children)) != len(self.children):
            raise HierarchyError(
                f"constraint on parent {self.parent} lists a child twice"
            )
        if self.parent in self.children:
            raise HierarchyError(f"item {self.parent} cannot be its own child")


@dataclass(frozen=True)
class Hierarchy:
    """Labeled items plus height-ordered aggregation constraints.

    Construction validates the tree rules (each item is a child in at
    most one constraint; no ancestor cycles), derives strictness (every
    item is a parent in at most one constraint), and reorders the
    constraints by decreasing parent height, stable by parent index.
    Forests (multiple roots) are allowed; depth 0 is any item without a
    parent and height is measured from the globally deepest item.
    """

    items: tuple[str, ...]
    constraints: tuple[Constraint, ...]
    strict: bool = field(init=False)

    def __post_init__(self):
        items = tuple(str(label) for label in self.items)
        object.__setattr__(self, "items", items)
        if len(set(items)) != len(items):
            dupes = sorted({x for x in items if items.count(x) > 1})
            raise HierarchyError(f"duplicate item labels: {dupes}")

        constraints = tuple(
            c if isinstance(c, Constraint) else Constraint(*c) for c in self.constraints
        )
        n = len(items)
        parent_of: dict[int, int] = {}
        for c in constraints:
            if not (0 <= c.parent < n):
                raise HierarchyError(f"parent index {c.parent} out of range")
            for child in c.children:
                if not (0 <= child < n):
                    raise HierarchyError(f"child index {child} out of range")
                if child in parent_of:
                    raise HierarchyError(
                        f"item {items[child]!r} has two parents: "
                        f"{items[parent_of[child]]!r} and {items[c.parent]!r}"
                    )
                parent_of[child] = c.parent

        depth = _depths(n, parent_of, items)
        max_depth = int(depth.max(initial=0))
        height = max_depth - depth
        ordered = sorted(
            constraints, key=lambda c: (-height[c.parent], c.parent)
        )
        object.__setattr__(self, "constraints", tuple(ordered))

        parents = [c.parent for c in ordered]
        object.__setattr__(self, "strict", len(set(parents)) == len(parents))

    @property
    def n_items(self) -> int:
        return len(self.items)

    @property
    def n_constraints(self) -> int:
        return len(self.constraints)

    def parent_constraint_index(self) -> np.ndarray:
        """For each item, the index of the constraint it is a child of (-1 if root)."""
        idx = np.full(self.n_items, -1, dtype=np.int64)
        for k, c in enumerate(self.constraints):
            for child in c.children:
                idx[child] = k
        return idx


def _depths(n: int, parent_of: dict[int, int], items: Sequence[str]) -> np.ndarray:
    """Depth of every item via memoized parent chains; raises on cycles."""
    depth = np.full(n, -1, dtype=np.int64)
    for start in range(n):
        if depth[start] >= 0:
            continue
        chain = []
        node = start
        on_chain = set()
        while node in parent_of and depth[node] < 0:
            if node in on_chain:
                cycle_start = chain.index(node)
                cycle = " -> ".join(items[i] for i in chain[cycle_start:] + [node])
                raise HierarchyError(f"hierarchy contains a cycle: {cycle}")
            on_chain.add(node)
            chain.append(node)
            node = parent_of[node]
        base = depth[node] if depth[node] >= 0 else 0
        if depth[node] < 0:
            depth[node] = 0
        for i, item in enumerate(reversed(chain)):
            depth[item] = base + i + 1
    return depth


@dataclass(frozen=True)
class DepthHeightTable:
    """Per-item depth and height plus the global maximum depth."""

    depth: np.ndarray
    height: np.ndarray
    max_depth: int


def compute_depth_height(h: Hierarchy) -> DepthHeightTable:
    """Depth (distance from a root) and height (max_depth - depth) per item."""
    parent_of = {
        child: c.parent for c in h.constraints for child in c.children
    }
    depth = _depths(h.n_items, parent_of, h.items)
    max_depth = int(depth.max(initial=0))
    return DepthHeightTable(depth=depth, height=max_depth - depth, max_depth=max_depth)


def canonical_matrix(h: Hierarchy) -> SparseConstraintMatrix:
    """The canonical aggregation matrix: +1 at each parent, -1 at each child.

    Rows follow the hierarchy's height-ordered constraints, so the
    restriction to parent columns is upper triangular with a +1 diagonal
    and the matrix has full row rank.
    """
    rows = []
    for c in h.constraints:
        cols = [c.parent] + list(c.children)
        vals = [1.0] + [-1.0] * len(c.children)
        rows.append((cols, vals))
    return SparseConstraintMatrix.from_rows(h.n_items, rows)


def heavy_weights(h: Hierarchy, yhat, base: float, mode: str) -> DiagonalWeights:
    """Exponentially graded weights ``base**height / yhat`` or ``base**depth / yhat``.

    ``mode="top"`` grades by height so coarse aggregate items dominate the
    objective; ``mode="bottom"`` grades by depth so leaves dominate. As
    ``base`` grows the corresponding least-squares solutions approach
    share-based disaggregation and bottom-up aggregation respectively.
    """
    values = as_values(yhat)
    if values.shape != (h.n_items,):
        raise HierarchyError(
            f"forecast vector has shape {values.shape}, expected ({h.n_items},)"
        )
    if np.any(values <= 0):
        bad = int(np.flatnonzero(values <= 0)[0])
        raise HierarchyError(
            f"graded weightings require yhat > 0; item {h.items[bad]!r} has "
            f"{values[bad]!r}"
        )
    if base < 1.0:
        raise HierarchyError("the grading base must be >= 1")
    if mode not in ("top", "bottom"):
        raise HierarchyError(f"mode must be 'top' or 'bottom', got {mode!r}")

    table = compute_depth_height(h)
    exponent = table.height if mode == "top" else table.depth
    with np.errstate(over="ignore"):
        graded = np.power(float(base), exponent.astype(np.float64))
    if not np.all(np.isfinite(graded)):
        raise HierarchyError(
            f"base**{int(exponent.max())} overflows float range; use a smaller base"
        )
    return DiagonalWeights(graded / values)


def share_based_disaggregate(h: Hierarchy, yhat) -> ForecastVector:
    """Top-down reference reconciler.

    Roots keep their forecasts; every child receives its parent's value
    times the child's share of the original sibling total. The output
    satisfies every aggregation constraint and stays positive.
    """
    values = as_values(yhat)
    if values.shape != (h.n_items,):
        raise HierarchyError(f"expected {h.n_items} forecasts, got {values.shape}")
    if np.any(values <= 0):
        bad = int(np.flatnonzero(values <= 0)[0])
        raise HierarchyError(
            f"share-based disaggregation requires yhat > 0; item "
            f"{h.items[bad]!r} has {values[bad]!r}"
        )
    out = values.copy()
    # Height-descending constraint order guarantees a parent's own value is
    # final before its children are overwritten.
    for c in h.constraints:
        child_idx = np.fromiter(c.children, dtype=np.int64)
        total = values[child_idx].sum()
        if total <= 0:
            raise HierarchyError(
                f"children of {h.items[c.parent]!r} sum to {total!r}"
            )
        out[child_idx] = values[child_idx] / total * out[c.parent]
    labels = yhat.labels if isinstance(yhat, ForecastVector) else None
    return ForecastVector(out, labels)


def bottom_up_aggregate(h: Hierarchy, yhat) -> ForecastVector:
    """Bottom-up reference reconciler for strict hierarchies.

    Leaves keep their forecasts and every parent is overwritten with the
    sum of its (already final) children. Ill-defined when some parent
    aggregates more than one child set, hence the strictness requirement.
    """
    if not h.strict:
        raise HierarchyError(
            "bottom-up aggregation requires a strict hierarchy (each parent "
            "aggregates exactly one child set)"
        )
    values = as_values(yhat)
    if values.shape != (h.n_items,):
        raise HierarchyError(f"expected {h.n_items} forecasts, got {values.shape}")
    out = values.copy()
    for c in reversed(h.constraints):
        child_idx = np.fromiter(c.children, dtype=np.int64)
        out[c.parent] = out[child_idx].sum()
    labels = yhat.labels if isinstance(yhat, ForecastVector) else None
    return ForecastVector(out, labels)


def load_edge_list(path) -> Hierarchy:
    """Load a hierarchy from a text file of ``parent<TAB>child`` lines.

    Item labels are arbitrary UTF-8 tokens without tabs; items are
    indexed in order of first appearance. Blank lines are ignored.
    """
    index: dict[str, int] = {}
    children_of: dict[int, list[int]] = {}
    order: list[int] = []

    def intern(label: str) -> int:
        if label not in index:
            index[label] = len(index)
        return index[label]

    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2 or not parts[0] or not parts[1]:
                raise HierarchyError(
                    f"{path}:{lineno}: expected 'parent<TAB>child', got {line!r}"
                )
            parent = intern(parts[0])
            child = intern(parts[1])
            if parent not in children_of:
                children_of[parent] = []
                order.append(parent)
            children_of[parent].append(child)

    items = tuple(sorted(index, key=index.get))
    constraints = tuple(
        Constraint(parent, tuple(children_of[parent])) for parent in order
    )
    return Hierarchy(items=items, constraints=constraints)
