"""Utilities for reading and writing delimited time-series tables.

The table format is UTF-8, comma delimited, with a header row
``sample_id,time,<feature_1>,...,<feature_D>``. Rows of one sample appear in time
order; an empty cell denotes a missing value.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from .errors import DataValidationError
from .tsdata import FloatArray, TimeSeriesBatch


@dataclass(frozen=True)
class TableSchema:
    """Column layout of a time-series table."""

    id_column: str = "sample_id"
    time_column: str = "time"
    features: tuple[str, ...] | None = None
    """Expected feature columns; ``None`` accepts every remaining column in file order."""


class TableError(DataValidationError):
    """Raised when a table fails validation."""


def _parse_float(raw: str, *, row: int, column: str) -> float:
    try:
        value = float(raw)
    except ValueError as exc:
        raise TableError(f"row {row}: column {column!r} has unparseable number {raw!r}") from exc
    if not math.isfinite(value):
        raise TableError(f"row {row}: column {column!r} has non-finite value {raw!r}")
    return value


def load_table(path: Path, schema: TableSchema | None = None) -> TimeSeriesBatch:
    """Read a delimited table into a :class:`TimeSeriesBatch`.

    Samples keep their first-appearance order. Every sample must have the same number
    of rows.

    Raises
    ------
    TableError
        On missing columns, duplicate ``(sample, time)`` rows, unparseable numbers or
        time going backwards; row numbers count the header as row 1.
    """

    schema = schema or TableSchema()
    rows_by_sample: dict[str, list[tuple[float, list[float]]]] = {}
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None:
            raise TableError(f"{path}: empty table")
        required = {schema.id_column, schema.time_column}
        missing = required - set(reader.fieldnames)
        if schema.features is not None:
            missing |= set(schema.features) - set(reader.fieldnames)
        if missing:
            raise TableError(f"{path}: missing required columns: {', '.join(sorted(missing))}")
        features = (
            list(schema.features)
            if schema.features is not None
            else [c for c in reader.fieldnames if c not in required]
        )
        if not features:
            raise TableError(f"{path}: no feature columns")

        for row_no, raw in enumerate(reader, start=2):
            sample = (raw[schema.id_column] or "").strip()
            if not sample:
                raise TableError(f"row {row_no}: empty {schema.id_column}")
            time = _parse_float(raw[schema.time_column] or "", row=row_no, column=schema.time_column)
            values = [
                math.nan if (raw[c] or "").strip() == "" else _parse_float(raw[c], row=row_no, column=c)
                for c in features
            ]
            history = rows_by_sample.setdefault(sample, [])
            if history:
                last_time = history[-1][0]
                if time == last_time or any(t == time for t, _ in history):
                    raise TableError(f"row {row_no}: duplicate row for sample {sample!r} at time {time}")
                if time < last_time:
                    raise TableError(
                        f"row {row_no}: time {time} goes backwards for sample {sample!r} "
                        f"(previous {last_time})"
                    )
            history.append((time, values))

    if not rows_by_sample:
        raise TableError(f"{path}: no data rows")
    lengths = {len(v) for v in rows_by_sample.values()}
    if len(lengths) != 1:
        raise TableError(f"{path}: samples have different numbers of steps {sorted(lengths)}")

    ids = list(rows_by_sample)
    timestamps = np.array([[t for t, _ in rows_by_sample[s]] for s in ids])
    values = np.array([[v for _, v in rows_by_sample[s]] for s in ids])
    mask = (~np.isnan(values)).astype(np.float64)
    return TimeSeriesBatch.from_arrays(
        np.nan_to_num(values), mask, timestamps, sample_ids=ids
    )


def feature_names(n_features: int) -> list[str]:
    return [f"feature_{d + 1}" for d in range(n_features)]


def write_table(
    path: Path,
    values: FloatArray,
    mask: FloatArray | None,
    timestamps: FloatArray,
    sample_ids: Sequence[str],
    features: Sequence[str] | None = None,
) -> Path:
    """Write ``[N, T, D]`` *values* as a long table; masked-out cells become empty."""

    n, t, d = values.shape
    features = list(features) if features is not None else feature_names(d)
    data = np.where(mask == 1, values, np.nan) if mask is not None else values
    frame = pd.DataFrame(data.reshape(n * t, d), columns=features)
    frame.insert(0, "time", timestamps.reshape(n * t))
    frame.insert(0, "sample_id", np.repeat(np.asarray(sample_ids, dtype=object), t))
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.17g")
    return path


def load_labels(path: Path, sample_ids: Sequence[str]) -> FloatArray:
    """Read a ``sample_id,label`` table and align it with *sample_ids*."""

    frame = pd.read_csv(path, dtype={"sample_id": str})
    if not {"sample_id", "label"}.issubset(frame.columns):
        raise TableError(f"{path}: labels table needs sample_id and label columns")
    if frame["sample_id"].duplicated().any():
        raise TableError(f"{path}: duplicate sample ids in labels table")
    lookup = frame.set_index("sample_id")["label"]
    absent = [s for s in sample_ids if s not in lookup.index]
    if absent:
        raise TableError(f"{path}: no label for samples {absent[:5]}")
    labels = lookup.loc[list(sample_ids)].to_numpy(dtype=np.float64)
    if not np.all((labels == 0) | (labels == 1)):
        raise TableError(f"{path}: labels must be 0 or 1")
    return labels


def write_labels(path: Path, labels: FloatArray, sample_ids: Sequence[str]) -> Path:
    frame = pd.DataFrame({"sample_id": list(sample_ids), "label": labels.astype(int)})
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False)
    return path


__all__ = [
    "TableSchema",
    "TableError",
    "load_table",
    "write_table",
    "load_labels",
    "write_labels",
    "feature_names",
]
