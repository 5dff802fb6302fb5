"""Traffic and runtime as the number of clients grows.

The total amount of data is held fixed and split evenly, so any change in
per-participant traffic comes from the protocol, not from the data size.
Each configuration runs once without a bandwidth limit and once behind a
paced relay.
"""

from __future__ import annotations

import logging
import tempfile
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from ..controller import StepSpec
from .partition import SplitPlan, partition_dataset
from .simulation import SimConfig, run_once

log = logging.getLogger(__name__)

STUDY_APPS = {
    "rf": StepSpec("random_forest", {"task": "classification", "n_trees": 100}),
    "logreg": StepSpec("logistic_regression", {}),
}


@dataclass
class ScalingPoint:
    model: str
    n_clients: int
    bandwidth_limit: Optional[float]
    wall_clock: float
    participant_bytes: float
    coordinator_bytes: int
    status: str


def participant_traffic(traffic: dict[str, dict[str, int]], coordinator: str) -> float:
    """Mean bytes sent plus received over the non-coordinating clients."""
    vals = [t["sent"] + t["received"] for c, t in traffic.items() if c != coordinator]
    return float(np.mean(vals)) if vals else 0.0


def run_scaling_study(
    dataset: pd.DataFrame,
    models: Iterable[str] = ("rf", "logreg"),
    client_counts: Iterable[int] = (2, 4, 6, 8),
    bandwidth_limit: float = 100_000.0,
    poll_interval: float = 0.2,
    seed: int = 0,
    label_column: str = "y",
    work_dir: Optional[Path] = None,
) -> list[ScalingPoint]:
    work = Path(work_dir or tempfile.mkdtemp(prefix="fedmesh-scale-"))
    points = []
    for n in client_counts:
        dirs = partition_dataset(dataset, SplitPlan.equal(n), seed, work / f"n{n}" / "clients")
        for model in models:
            for limit in (None, bandwidth_limit):
                tag = "throttled" if limit else "free"
                config = SimConfig(
                    data_dirs=dirs,
                    steps=[STUDY_APPS[model]],
                    defaults={"label_column": label_column},
                    poll_interval=poll_interval,
                    bandwidth_limit=limit,
                    seed=seed,
                    repetitions=1,
                    work_dir=work / f"n{n}" / f"{model}_{tag}",
                )
                run = run_once(config)
                coord = config.clients[0]
                point = ScalingPoint(
                    model=model,
                    n_clients=n,
                    bandwidth_limit=limit,
                    wall_clock=run.wall_clock,
                    participant_bytes=participant_traffic(run.traffic, coord),
                    coordinator_bytes=run.traffic[coord]["sent"] + run.traffic[coord]["received"],
                    status=run.status,
                )
                log.info("scaling %s", point)
                points.append(point)
    return points


def scaling_table(points: list[ScalingPoint]) -> pd.DataFrame:
    return pd.DataFrame([asdict(p) for p in points])


def throttle_ratios(points: list[ScalingPoint]) -> pd.DataFrame:
    """Throttled over unthrottled wall time per model and client count."""
    df = scaling_table(points)
    free = df[df.bandwidth_limit.isna()].set_index(["model", "n_clients"]).wall_clock
    slow = df[df.bandwidth_limit.notna()].set_index(["model", "n_clients"]).wall_clock
    return (slow / free).rename("ratio").reset_index()
