"""Synthetic fixtures and CSV import/export."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DatasetTable, RngStream
from .errors import ConfigError


def make_blobs(n=2000, p=10, sep=2.0, seed=0, informative=None) -> DatasetTable:
    """Two Gaussian classes with unit covariance.

    Class means sit at ``+-sep/2`` on the first ``informative`` features
    (default ``p // 2``); the remaining features are pure noise.  Labels
    alternate so the classes are balanced to within one row.
    """
    if n < 1 or p < 1:
        raise ValueError("need n >= 1 and p >= 1")
    informative = p // 2 if informative is None else informative
    g = RngStream(seed, 0x626C6F6273).generator()
    y = np.arange(n) % 2
    y = y[g.permutation(n)]
    X = g.standard_normal((n, p))
    X[:, :informative] += np.where(y[:, None] == 1, sep / 2, -sep / 2)
    return DatasetTable.from_arrays(X, y)


def train_test_split(data: DatasetTable, test_fraction: float, rng: RngStream):
    perm = rng.generator().permutation(data.n)
    n_test = int(round(test_fraction * data.n))
    return data.take(np.sort(perm[n_test:])), data.take(np.sort(perm[:n_test]))


@dataclass(frozen=True)
class CsvSchema:
    label: str = "label"
    id_column: str | None = None  # None: ids are the 0-based data-row order
    features: tuple | None = None  # None: every other column


class CsvFormatError(ConfigError):
    def __init__(self, path, line, message):
        super().__init__(f"{path}:{line}: {message}")
        self.line = line


def ingest_csv(path, schema: CsvSchema = CsvSchema()) -> DatasetTable:
    """Read a headed CSV into a table; bad rows abort with their line number."""
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise CsvFormatError(path, 1, "empty file, expected a header row") from None
        header = [h.strip() for h in header]
        if schema.label not in header:
            raise CsvFormatError(path, 1, f"label column {schema.label!r} missing from header")
        if schema.id_column is not None and schema.id_column not in header:
            raise CsvFormatError(path, 1, f"id column {schema.id_column!r} missing from header")
        skip = {schema.label, schema.id_column}
        names = list(schema.features) if schema.features is not None else [h for h in header if h not in skip]
        missing = [f for f in names if f not in header]
        if missing:
            raise CsvFormatError(path, 1, f"feature columns missing: {missing}")
        col = {h: i for i, h in enumerate(header)}
        f_idx = [col[f] for f in names]
        X, y, ids = [], [], []
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise CsvFormatError(path, line, f"expected {len(header)} fields, found {len(row)}")
            try:
                X.append([float(row[i]) for i in f_idx])
                lab = float(row[col[schema.label]])
            except ValueError as exc:
                raise CsvFormatError(path, line, str(exc)) from None
            if lab != int(lab) or lab < 0:
                raise CsvFormatError(path, line, f"label {row[col[schema.label]]!r} is not a nonnegative integer")
            y.append(int(lab))
            if schema.id_column is not None:
                try:
                    ids.append(int(row[col[schema.id_column]]))
                except ValueError:
                    raise CsvFormatError(path, line, f"id {row[col[schema.id_column]]!r} is not an integer") from None
            else:
                ids.append(len(ids))
    X = np.array(X, dtype=np.float64).reshape(len(y), len(names))
    if len(set(ids)) != len(ids):
        raise CsvFormatError(path, 1, "duplicate sample ids")
    return DatasetTable.from_arrays(X, np.array(y, np.int64), np.array(ids, np.int64))


def export_csv(data: DatasetTable, path, schema: CsvSchema = CsvSchema(id_column="id")) -> Path:
    """Write a table so that :func:`ingest_csv` reproduces it exactly."""
    names = list(schema.features) if schema.features is not None else [f"x{j}" for j in range(data.p)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ([schema.id_column] if schema.id_column else []) + names + [schema.label]
        w.writerow(head)
        for i in range(data.n):
            row = ([int(data.ids[i])] if schema.id_column else []) + [repr(float(v)) for v in data.features[i]]
            w.writerow(row + [int(data.labels[i])])
    return Path(path)
