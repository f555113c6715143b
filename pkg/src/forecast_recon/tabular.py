"""Deriving aggregation constraints directly from tabular forecast datasets.

Every dataset carries dimension columns (labels) and one metric column
(forecast values). When two datasets share dimension columns, grouping
both by the shared columns pins down sums that must agree: for each
group key present in both, the first dataset's rows get +1 and the
second dataset's rows get -1 in a new constraint row. Stacking the
pairwise constraints of several datasets over one global entry indexing
yields the full aggregation matrix without any manual specification.

Assumptions on the inputs (checked where possible, the caller's job
otherwise): column names follow one naming convention across datasets,
coarser columns are spelled out explicitly wherever finer ones appear,
and each column partitions the space, so that grouping out a column
produces correct totals.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import DatasetError
from .sparse_core import ForecastVector, SparseConstraintMatrix

__all__ = [
    "TabularDataset",
    "ConstraintKey",
    "ConstraintBuildResult",
    "build_constraints",
    "build_constraints_multi",
    "has_disjoint_row_supports",
    "load_csv_dataset",
    "write_reconciled_csv",
    "export_matrix_market",
]


@dataclass(frozen=True)
class TabularDataset:
    """One tabular forecast dataset: dimension labels plus a metric column.

    ``dimension_rows[i]`` holds row i's labels aligned with
    ``dimension_columns``; ``metrics[i]`` is its forecast value. Rows
    with duplicate dimension tuples violate the partition assumption;
    they are reported by ``validate`` and rejected at constraint-build
    time rather than at construction, so that validation tooling can
    still load and inspect broken files.
    """

    name: str
    dimension_columns: tuple[str, ...]
    metric_column: str
    dimension_rows: tuple[tuple[str, ...], ...]
    metrics: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "dimension_columns", tuple(str(c) for c in self.dimension_columns)
        )
        metrics = np.ascontiguousarray(self.metrics, dtype=np.float64)
        object.__setattr__(self, "metrics", metrics)
        rows = tuple(tuple(str(v) for v in row) for row in self.dimension_rows)
        object.__setattr__(self, "dimension_rows", rows)

        columns = self.dimension_columns + (self.metric_column,)
        if len(set(columns)) != len(columns):
            raise DatasetError(
                f"dataset {self.name!r}: column names must be unique, got {columns}"
            )
        if metrics.ndim != 1 or len(rows) != metrics.shape[0]:
            raise DatasetError(
                f"dataset {self.name!r}: {len(rows)} dimension rows for "
                f"{metrics.shape} metrics"
            )
        width = len(self.dimension_columns)
        for i, row in enumerate(rows):
            if len(row) != width:
                raise DatasetError(
                    f"dataset {self.name!r} row {i}: {len(row)} labels for "
                    f"{width} dimension columns"
                )

    @property
    def n_rows(self) -> int:
        return len(self.dimension_rows)

    @classmethod
    def from_records(
        cls,
        name: str,
        dimension_columns: Sequence[str],
        metric_column: str,
        records: Iterable[Mapping[str, object]],
    ) -> "TabularDataset":
        """Build from mapping-style records (extra keys are ignored)."""
        dims = tuple(str(c) for c in dimension_columns)
        rows = []
        metrics = []
        for i, record in enumerate(records):
            try:
                rows.append(tuple(str(record[c]) for c in dims))
            except KeyError as missing:
                raise DatasetError(
                    f"dataset {name!r} row {i}: missing dimension column {missing}"
                ) from None
            if metric_column not in record:
                raise DatasetError(
                    f"dataset {name!r} row {i}: missing metric column "
                    f"{metric_column!r}"
                )
            metrics.append(float(record[metric_column]))  # type: ignore[arg-type]
        return cls(
            name=name,
            dimension_columns=dims,
            metric_column=metric_column,
            dimension_rows=tuple(rows),
            metrics=np.asarray(metrics, dtype=np.float64),
        )

    def duplicate_keys(self) -> list[tuple[str, ...]]:
        """Dimension tuples appearing in more than one row."""
        seen: set[tuple[str, ...]] = set()
        dupes: list[tuple[str, ...]] = []
        for row in self.dimension_rows:
            if row in seen and row not in dupes:
                dupes.append(row)
            seen.add(row)
        return dupes

    def validate(self) -> list[str]:
        """Human-readable schema violations (empty when clean)."""
        problems = []
        for key in self.duplicate_keys():
            problems.append(
                f"dataset {self.name!r}: duplicate dimension tuple {key} breaks "
                "the partition assumption"
            )
        negative = np.flatnonzero(self.metrics < 0)
        if negative.size:
            problems.append(
                f"dataset {self.name!r}: {negative.size} negative metric values "
                f"(first at row {int(negative[0])})"
            )
        if not np.all(np.isfinite(self.metrics)):
            bad = int(np.flatnonzero(~np.isfinite(self.metrics))[0])
            problems.append(
                f"dataset {self.name!r}: non-finite metric at row {bad}"
            )
        return problems

    def group_by(self, columns: Sequence[str]) -> dict[tuple[str, ...], list[int]]:
        """Row indices grouped by the projection onto the given columns."""
        positions = [self.dimension_columns.index(c) for c in columns]
        groups: dict[tuple[str, ...], list[int]] = {}
        for i, row in enumerate(self.dimension_rows):
            key = tuple(row[p] for p in positions)
            groups.setdefault(key, []).append(i)
        return groups


@dataclass(frozen=True)
class ConstraintKey:
    """Provenance of one constraint row: the dataset pair and group key."""

    first: str
    second: str
    dimensions: tuple[tuple[str, str], ...]  # (column, label) pairs


@dataclass(frozen=True)
class ConstraintBuildResult:
    """The derived matrix, the stacked forecasts, and row provenance."""

    A: SparseConstraintMatrix
    yhat: ForecastVector
    group_keys: tuple[ConstraintKey, ...]
    warnings: tuple[str, ...]
    offsets: dict[str, int]  # dataset name -> first entry index in yhat


def _shared_columns(d1: TabularDataset, d2: TabularDataset) -> tuple[str, ...]:
    shared = set(d1.dimension_columns) & set(d2.dimension_columns)
    return tuple(sorted(shared))


def _check_partition(dataset: TabularDataset) -> None:
    dupes = dataset.duplicate_keys()
    if dupes:
        raise DatasetError(
            f"dataset {dataset.name!r}: duplicate dimension tuple {dupes[0]} "
            "(each dimension tuple must be unique)"
        )


def _pair_rows(
    d1: TabularDataset,
    d2: TabularDataset,
    offset1: int,
    offset2: int,
    strict: bool,
):
    """Constraint rows for one dataset pair, in lexicographic key order."""
    shared = _shared_columns(d1, d2)
    if not shared:
        raise DatasetError(
            f"datasets {d1.name!r} and {d2.name!r} share no dimension columns"
        )
    _check_partition(d1)
    _check_partition(d2)

    groups1 = d1.group_by(shared)
    groups2 = d2.group_by(shared)
    rows = []
    keys = []
    warnings = []
    for key in sorted(set(groups1) | set(groups2)):
        in1 = key in groups1
        in2 = key in groups2
        if not (in1 and in2):
            present, absent = (d1.name, d2.name) if in1 else (d2.name, d1.name)
            message = (
                f"group key {dict(zip(shared, key))} appears in {present!r} "
                f"but not in {absent!r}; constraint skipped"
            )
            if strict:
                raise DatasetError(message)
            warnings.append(message)
            continue
        cols = [offset1 + i for i in groups1[key]] + [offset2 + i for i in groups2[key]]
        vals = [1.0] * len(groups1[key]) + [-1.0] * len(groups2[key])
        rows.append((cols, vals))
        keys.append(
            ConstraintKey(first=d1.name, second=d2.name, dimensions=tuple(zip(shared, key)))
        )
    return rows, keys, warnings


def _stack(datasets: Sequence[TabularDataset]):
    offsets = {}
    labels = []
    values = []
    total = 0
    for d in datasets:
        if d.name in offsets:
            raise DatasetError(f"duplicate dataset name {d.name!r}")
        offsets[d.name] = total
        total += d.n_rows
        values.append(d.metrics)
        labels.extend((d.name, row) for row in d.dimension_rows)
    yhat = ForecastVector(np.concatenate(values) if values else np.zeros(0), tuple(labels))
    return offsets, yhat, total


def build_constraints(
    d1: TabularDataset, d2: TabularDataset, *, strict: bool = False
) -> ConstraintBuildResult:
    """Derive constraints from one dataset pair.

    One constraint row per shared-dimension group key present in both
    datasets: +1 on the first dataset's row indices, -1 on the second's.
    The stacked forecast vector is the first dataset's metrics followed
    by the second's. Group keys present on only one side are skipped
    with a warning record, or raise when ``strict`` is set.
    """
    offsets, yhat, total = _stack([d1, d2])
    rows, keys, warnings = _pair_rows(
        d1, d2, offsets[d1.name], offsets[d2.name], strict
    )
    A = SparseConstraintMatrix.from_rows(total, rows)
    return ConstraintBuildResult(
        A=A,
        yhat=yhat,
        group_keys=tuple(keys),
        warnings=tuple(warnings),
        offsets=offsets,
    )


def build_constraints_multi(
    datasets: Sequence[TabularDataset], *, strict: bool = False
) -> ConstraintBuildResult:
    """Stack pairwise constraints for every dataset pair that shares dimensions.

    All metric columns concatenate into one global forecast vector
    (dataset order, then row order). Exactly duplicated constraint rows,
    and rows that are the negation of an earlier row, are dropped.
    """
    if len(datasets) < 2:
        raise DatasetError("need at least two datasets to build constraints")
    offsets, yhat, total = _stack(datasets)

    rows = []
    keys = []
    warnings: list[str] = []
    any_pair = False
    for i in range(len(datasets)):
        for j in range(i + 1, len(datasets)):
            d1, d2 = datasets[i], datasets[j]
            if not _shared_columns(d1, d2):
                continue
            any_pair = True
            pair_rows, pair_keys, pair_warnings = _pair_rows(
                d1, d2, offsets[d1.name], offsets[d2.name], strict
            )
            rows.extend(pair_rows)
            keys.extend(pair_keys)
            warnings.extend(pair_warnings)
    if not any_pair:
        raise DatasetError("no dataset pair shares any dimension column")

    kept_rows = []
    kept_keys = []
    seen: set[tuple] = set()
    for (cols, vals), key in zip(rows, keys):
        order = np.argsort(cols, kind="stable")
        signature = (
            tuple(np.asarray(cols)[order]),
            tuple(np.asarray(vals)[order]),
        )
        negated = (signature[0], tuple(-v for v in signature[1]))
        if signature in seen or negated in seen:
            warnings.append(
                f"dropped duplicate constraint for {key.first!r}/{key.second!r} "
                f"group {dict(key.dimensions)}"
            )
            continue
        seen.add(signature)
        kept_rows.append((cols, vals))
        kept_keys.append(key)

    A = SparseConstraintMatrix.from_rows(total, kept_rows)
    return ConstraintBuildResult(
        A=A,
        yhat=yhat,
        group_keys=tuple(kept_keys),
        warnings=tuple(warnings),
        offsets=offsets,
    )


def has_disjoint_row_supports(A: SparseConstraintMatrix) -> bool:
    """True iff every column of A holds at most one nonzero entry."""
    if A.nnz == 0:
        return True
    counts = np.bincount(A.col_indices, minlength=A.n_cols)
    return bool(counts.max(initial=0) <= 1)


# -- file formats -----------------------------------------------------------


def load_csv_dataset(
    path,
    name: str,
    dimension_columns: Sequence[str],
    metric_column: str,
) -> tuple[TabularDataset, list[dict[str, str]]]:
    """Read a dataset from an RFC-4180 CSV file with a header row.

    Returns the dataset plus the raw rows (all columns preserved) so the
    caller can write outputs that keep unrelated columns intact.
    """
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise DatasetError(f"dataset file not found: {path}") from None
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DatasetError(f"{path}: empty file, expected a header row")
        header = list(reader.fieldnames)
        for column in list(dimension_columns) + [metric_column]:
            if column not in header:
                raise DatasetError(
                    f"{path}: column {column!r} not found in header {header}"
                )
        raw_rows = list(reader)

    rows = []
    metrics = []
    for i, record in enumerate(raw_rows, start=2):  # header is line 1
        rows.append(tuple(record[c] for c in dimension_columns))
        text = record[metric_column]
        try:
            metrics.append(float(text))
        except (TypeError, ValueError):
            raise DatasetError(
                f"{path}: non-numeric metric {text!r} at line {i}"
            ) from None
    dataset = TabularDataset(
        name=name,
        dimension_columns=tuple(dimension_columns),
        metric_column=metric_column,
        dimension_rows=tuple(rows),
        metrics=np.asarray(metrics, dtype=np.float64),
    )
    return dataset, raw_rows


def write_reconciled_csv(
    path,
    raw_rows: Sequence[Mapping[str, str]],
    header: Sequence[str],
    reconciled: np.ndarray,
    column_name: str = "reconciled",
) -> None:
    """Write the input rows back out with a reconciled column appended."""
    if len(raw_rows) != reconciled.shape[0]:
        raise DatasetError(
            f"{len(raw_rows)} rows but {reconciled.shape[0]} reconciled values"
        )
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(header) + [column_name])
        writer.writeheader()
        for record, value in zip(raw_rows, reconciled):
            out = dict(record)
            out[column_name] = repr(float(value))
            writer.writerow(out)


def export_matrix_market(path, A: SparseConstraintMatrix) -> None:
    """Write A in Matrix Market coordinate format."""
    from scipy import io as scipy_io

    scipy_io.mmwrite(str(path), A.to_scipy())


def write_stacked_vector_csv(path, result: ConstraintBuildResult) -> None:
    """Write the stacked forecast vector with its provenance labels.

    Columns: global entry index, source dataset, the row's dimension
    labels joined with ``|``, and the forecast value. The index column is
    the column numbering of the exported constraint matrix.
    """
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["entry", "dataset", "dimensions", "value"])
        labels = result.yhat.labels or (("", ()),) * len(result.yhat)
        for i, (label, value) in enumerate(zip(labels, result.yhat.values)):
            dataset, dims = label
            writer.writerow([i, dataset, "|".join(dims), repr(float(value))])
