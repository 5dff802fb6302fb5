from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from ..fed_ml.data import DataError, write_table
from ..fed_ml.forest import apportion

UNEVEN_PLAN = (0.10, 0.15, 0.15, 0.30, 0.30)


@dataclass
class SplitPlan:
    fractions: tuple[float, ...]

    def __post_init__(self) -> None:
        self.fractions = tuple(float(f) for f in self.fractions)
        if not self.fractions or any(f <= 0 for f in self.fractions):
            raise ValueError("fractions must be positive")
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"fractions sum to {sum(self.fractions)}, not 1")

    @classmethod
    def parse(cls, text: str) -> "SplitPlan":
        return cls(tuple(float(x) for x in text.split(",") if x.strip()))

    @classmethod
    def equal(cls, n: int) -> "SplitPlan":
        return cls(tuple([1.0 / n] * n))

    def counts(self, n_rows: int) -> list[int]:
        if n_rows < len(self.fractions):
            raise ValueError(f"{n_rows} rows cannot feed {len(self.fractions)} clients")
        return apportion(self.fractions, n_rows)


def read_dataset(csv: Path) -> pd.DataFrame:
    csv = Path(csv)
    try:
        df = pd.read_csv(csv)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise DataError(f"cannot read {csv}: {exc}") from exc
    bad = df.columns[df.isna().any()].tolist()
    if bad:
        row = int(df[bad[0]].isna().to_numpy().nonzero()[0][0])
        raise DataError(f"{csv}: missing value in column {bad[0]!r} at data row {row + 1}")
    return df


def partition_frame(df: pd.DataFrame, plan: SplitPlan, seed) -> list[pd.DataFrame]:
    counts = plan.counts(len(df))
    perm = np.random.default_rng(seed).permutation(len(df))
    bounds = np.concatenate([[0], np.cumsum(counts)])
    return [df.iloc[perm[a:b]].reset_index(drop=True) for a, b in zip(bounds[:-1], bounds[1:])]


def partition_dataset(csv, plan: SplitPlan, seed, out_dir, sentinel: Optional[str] = None) -> list[Path]:
    """Shuffle rows by ``seed`` and write ``client_<i>/data.csv`` per client.

    With ``sentinel`` set, a leading ``record_id`` column of unique marker
    strings is added (list it under ``ignore_columns``).
    """
    df = read_dataset(csv) if not isinstance(csv, pd.DataFrame) else csv
    dirs = []
    for i, part in enumerate(partition_frame(df, plan, seed), start=1):
        d = Path(out_dir) / f"client_{i}"
        if sentinel is not None:
            part = part.copy()
            part.insert(0, "record_id", [f"{sentinel}-c{i}-r{r}" for r in range(len(part))])
        write_table(part, d / "data.csv")
        dirs.append(d)
    return dirs
