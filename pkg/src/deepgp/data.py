"""CSV ingestion, standardisation, and the bundled toy datasets."""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .model import Standardizer


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    """Features X (N x D) and targets Y (N x P), possibly standardised.

    ``x_scaler``/``y_scaler`` map standardised values back to file units;
    they are identity maps when normalisation is off.
    """

    X: np.ndarray
    Y: np.ndarray
    feature_names: list[str]
    target_names: list[str]
    x_scaler: Standardizer
    y_scaler: Standardizer
    normalised: bool
    X_raw: np.ndarray
    Y_raw: np.ndarray

    @property
    def num_data(self) -> int:
        return self.X.shape[0]


def fit_standardizer(values: np.ndarray) -> Standardizer:
    mean = values.mean(axis=0)
    std = values.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    return Standardizer(mean, std)


def identity_standardizer(width: int) -> Standardizer:
    return Standardizer(np.zeros(width), np.ones(width))


def read_csv_table(path: str | os.PathLike) -> tuple[list[str], np.ndarray]:
    """Header names and an all-numeric float64 table."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"{path}: no such file")
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file") from None
        if len(set(header)) != len(header) or any(not h for h in header):
            raise DataError(f"{path}: header names must be non-empty and unique")
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f"{path}: row {line_no} has {len(row)} cells, expected {len(header)}")
            values = []
            for col, cell in zip(header, row):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise DataError(f"{path}: row {line_no}, column {col!r}: {cell!r} is not numeric") from None
            rows.append(values)
    if not rows:
        raise DataError(f"{path}: no data rows")
    table = np.array(rows, dtype=np.float64)
    if not np.all(np.isfinite(table)):
        raise DataError(f"{path}: contains non-finite values")
    return header, table


def load_csv(path: str | os.PathLike, target_columns: Sequence[str], normalise: bool = True) -> Dataset:
    """Split a CSV into non-target features X and target columns Y."""
    header, table = read_csv_table(path)
    missing = [c for c in target_columns if c not in header]
    if missing:
        raise DataError(f"{path}: target column(s) {missing} not in header {header}")
    if not target_columns:
        raise DataError("at least one target column is required")
    features = [c for c in header if c not in target_columns]
    if not features:
        raise DataError(f"{path}: no feature columns left after removing targets")
    X = table[:, [header.index(c) for c in features]]
    Y = table[:, [header.index(c) for c in target_columns]]
    if normalise:
        xs, ys = fit_standardizer(X), fit_standardizer(Y)
    else:
        xs, ys = identity_standardizer(X.shape[1]), identity_standardizer(Y.shape[1])
    return Dataset(xs.forward(X), ys.forward(Y), features, list(target_columns), xs, ys, normalise, X, Y)


def load_features(path: str | os.PathLike, feature_names: Sequence[str], target_names: Sequence[str] = ()):
    """Feature matrix (file units) and, when all present, the target matrix."""
    header, table = read_csv_table(path)
    missing = [c for c in feature_names if c not in header]
    if missing:
        raise DataError(f"{path}: feature column(s) {missing} not in header {header}")
    X = table[:, [header.index(c) for c in feature_names]]
    Y = None
    if target_names and all(c in header for c in target_names):
        Y = table[:, [header.index(c) for c in target_names]]
    return X, Y


def write_csv(path: str | os.PathLike, header: Sequence[str], rows: np.ndarray) -> None:
    """Atomic CSV write with full float precision."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(header)
        for row in np.atleast_2d(rows):
            writer.writerow([repr(float(v)) for v in row])
    os.replace(tmp, path)


# -- toy problems -------------------------------------------------------------


def toy_1d(n: int = 100, seed: int = 0, noise: float = 0.1) -> tuple[np.ndarray, np.ndarray]:
    """Noisy sinusoid on [-3, 3]."""
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(-3.0, 3.0, n))[:, None]
    Y = np.sin(2.0 * X) + 0.3 * X + noise * rng.standard_normal((n, 1))
    return X, Y


def step_data(n: int = 100, seed: int = 0, noise: float = 0.05) -> tuple[np.ndarray, np.ndarray]:
    """Noisy step function on [-1, 1] with the jump at 0."""
    rng = np.random.default_rng(seed)
    X = np.sort(rng.uniform(-1.0, 1.0, n))[:, None]
    Y = np.where(X > 0, 1.0, -1.0) + noise * rng.standard_normal((n, 1))
    return X, Y
