"""CSV ingestion and the on-disk split layout shared by all apps.

A step directory either holds one CSV (the raw data) or per-fold
subdirectories ``split_<i>/`` with ``train.csv`` and ``test.csv``.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
import pandas as pd

_SPLIT = re.compile(r"^split_(\d+)$")


class DataError(ValueError):
    pass


def read_table(path: Path) -> pd.DataFrame:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"input file not found: {path}")
    try:
        df = pd.read_csv(path)
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise DataError(f"cannot parse {path}: {exc}") from exc
    if df.empty:
        raise DataError(f"{path} has no rows")
    return df


def write_table(df: pd.DataFrame, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(path, index=False, float_format="%.17g")


def find_data_file(directory: Path) -> Path:
    """The single raw-data CSV of a directory (``data.csv`` wins ties)."""
    directory = Path(directory)
    csvs = sorted(p for p in directory.glob("*.csv") if p.is_file())
    if not csvs:
        raise DataError(f"no CSV file in {directory}")
    if len(csvs) == 1:
        return csvs[0]
    for name in ("data.csv", "train.csv"):
        if directory / name in csvs:
            return directory / name
    raise DataError(f"ambiguous input in {directory}: {[p.name for p in csvs]}")


@dataclass
class Split:
    name: str  # "split_3", or "" for a flat directory
    train: Path
    test: Optional[Path]

    def out_dir(self, root: Path) -> Path:
        return Path(root) / self.name if self.name else Path(root)


def list_splits(directory: Path) -> list[Split]:
    directory = Path(directory)
    found = []
    for p in directory.iterdir():
        m = _SPLIT.match(p.name)
        if m and p.is_dir():
            found.append((int(m.group(1)), p))
    if found:
        splits = []
        for _, p in sorted(found):
            test = p / "test.csv"
            splits.append(Split(p.name, p / "train.csv", test if test.is_file() else None))
        return splits
    if (directory / "train.csv").is_file():
        test = directory / "test.csv"
        return [Split("", directory / "train.csv", test if test.is_file() else None)]
    return [Split("", find_data_file(directory), None)]


def label_of(df: pd.DataFrame, label_column: Optional[str] = None) -> str:
    if label_column is None:
        return str(df.columns[-1])
    if label_column not in df.columns:
        raise DataError(f"label column {label_column!r} not found; columns are {list(df.columns)}")
    return label_column


def feature_columns(df: pd.DataFrame, label_column: Optional[str] = None, ignore: Iterable[str] = ()) -> list[str]:
    label = label_of(df, label_column)
    skip = set(ignore) | {label}
    cols = [str(c) for c in df.columns if str(c) not in skip]
    for c in cols:
        if not pd.api.types.is_numeric_dtype(df[c]):
            raise DataError(f"feature column {c!r} is not numeric (list it under ignore_columns to skip it)")
    return cols


def xy(df: pd.DataFrame, label_column: Optional[str] = None, ignore: Sequence[str] = ()) -> tuple[np.ndarray, np.ndarray]:
    cols = feature_columns(df, label_column, ignore)
    X = df[cols].to_numpy(dtype=np.float64)
    y = df[label_of(df, label_column)].to_numpy(dtype=np.float64)
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise DataError("missing or non-finite values in features or label")
    return X, y


def add_intercept(X: np.ndarray) -> np.ndarray:
    return np.column_stack([np.ones(X.shape[0]), X])
