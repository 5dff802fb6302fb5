"""In-process federation: one relay plus N controllers on loopback TCP.

Seeds: repetition ``r`` of a simulation with master seed ``s`` runs its
apps with ``derive_seed(s, r)``; inside the apps every client, split and
tree draws from ``SeedSequence([app_seed, client_index, split_index])``.
"""

from __future__ import annotations

import asyncio
import json
import secrets
import shutil
import tempfile
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from ..controller import Controller, RunReport, StepSpec, WorkflowSpec
from ..relay import RelayCore, RelayServer, TranscriptEntry


def derive_seed(master: int, repetition: int) -> int:
    return int(np.random.SeedSequence([int(master), int(repetition)]).generate_state(1)[0])


@dataclass
class SimConfig:
    data_dirs: list[Path]
    steps: list[StepSpec]
    defaults: dict = field(default_factory=dict)
    poll_interval: float = 3.0
    bandwidth_limit: Optional[float] = None
    seed: int = 0
    repetitions: int = 10
    work_dir: Optional[Path] = None
    record_transcript: bool = False
    step_timeout: float = 600.0

    def __post_init__(self) -> None:
        self.data_dirs = [Path(d) for d in self.data_dirs]
        if not 1 <= len(self.data_dirs) <= 64:
            raise ValueError("a simulation needs between 1 and 64 clients")
        if self.bandwidth_limit is not None and self.bandwidth_limit <= 0:
            raise ValueError("bandwidth_limit must be positive")
        self.steps = [s if isinstance(s, StepSpec) else StepSpec(s["app"], dict(s.get("config") or {})) for s in self.steps]

    @property
    def n_clients(self) -> int:
        return len(self.data_dirs)

    @property
    def clients(self) -> list[str]:
        return [f"client_{i + 1}" for i in range(self.n_clients)]

    @classmethod
    def from_dict(cls, raw: dict, base: Path = Path(".")) -> "SimConfig":
        raw = dict(raw)
        raw["data_dirs"] = [base / Path(d) for d in raw["data_dirs"]]
        if raw.get("work_dir"):
            raw["work_dir"] = base / Path(raw["work_dir"])
        if "workflow" in raw:
            wf = raw.pop("workflow")
            raw["steps"] = wf["steps"]
            raw["defaults"] = {**wf.get("defaults", {}), **raw.get("defaults", {})}
        if "n_clients" in raw and raw.pop("n_clients") != len(raw["data_dirs"]):
            raise ValueError("n_clients does not match the number of data_dirs")
        return cls(**raw)


@dataclass
class SimRun:
    repetition: int
    app_seed: int
    status: str
    wall_clock: float
    reports: dict[str, RunReport]
    traffic: dict[str, dict[str, int]]
    run_dirs: dict[str, Path]
    transcript: list[TranscriptEntry] = field(default_factory=list)
    metrics: Optional[dict] = None

    @property
    def coordinator(self) -> str:
        return next(iter(self.run_dirs))

    def step_output(self, client: str, index: int) -> Path:
        return Path(self.reports[client].steps[index].output_dir)

    def total_bytes(self) -> int:
        return sum(t["sent"] for t in self.traffic.values())

    def to_dict(self) -> dict:
        return {
            "repetition": self.repetition,
            "app_seed": self.app_seed,
            "status": self.status,
            "wall_clock": self.wall_clock,
            "traffic": self.traffic,
            "metrics": self.metrics,
            "clients": {c: r.to_dict() for c, r in self.reports.items()},
        }


def _quartiles(values) -> dict:
    q1, med, q3 = np.percentile(np.asarray(values, dtype=float), [25, 50, 75])
    return {"q25": float(q1), "median": float(med), "q75": float(q3)}


@dataclass
class SimulationReport:
    runs: list[SimRun]

    @property
    def ok(self) -> bool:
        return all(r.status == "ok" for r in self.runs)

    def summary(self) -> dict:
        clients = list(self.runs[0].traffic)
        return {
            "repetitions": len(self.runs),
            "status": "ok" if self.ok else "failed",
            "wall_clock": _quartiles([r.wall_clock for r in self.runs]),
            "traffic": {
                c: {
                    "sent": _quartiles([r.traffic[c]["sent"] for r in self.runs]),
                    "received": _quartiles([r.traffic[c]["received"] for r in self.runs]),
                }
                for c in clients
            },
            "metrics": self.runs[-1].metrics,
        }

    def table(self) -> str:
        s = self.summary()
        w = s["wall_clock"]
        lines = [
            f"repetitions {s['repetitions']}  status {s['status']}",
            f"wall clock [s]: median {w['median']:.3f}  (q25 {w['q25']:.3f}, q75 {w['q75']:.3f})",
            f"{'client':<12} {'sent (median)':>14} {'received (median)':>18}",
        ]
        for c, t in s["traffic"].items():
            lines.append(f"{c:<12} {t['sent']['median']:>14.0f} {t['received']['median']:>18.0f}")
        if s["metrics"]:
            mean = s["metrics"].get("mean", {})
            lines.append("metrics (mean over splits): " + ", ".join(f"{k}={v:.4f}" for k, v in mean.items()))
        return "\n".join(lines)


async def _run_once(config: SimConfig, repetition: int, work_dir: Path) -> SimRun:
    app_seed = derive_seed(config.seed, repetition)
    core = RelayCore(record=config.record_transcript)
    server = RelayServer(core, config.bandwidth_limit)
    host, port = await server.start("127.0.0.1", 0)
    clients = config.clients
    spec = WorkflowSpec(
        workflow_id=f"sim-{repetition}",
        steps=list(config.steps),
        clients=clients,
        coordinator=clients[0],
        relay=f"{host}:{port}",
        credentials=secrets.token_hex(8),
        defaults={**config.defaults, "seed": app_seed},
    )
    run_dirs = {c: work_dir / f"rep_{repetition}" / c for c in clients}
    for d in run_dirs.values():
        if d.exists():
            shutil.rmtree(d, onerror=lambda fn, p, exc: (Path(p).chmod(0o700), fn(p)))
    controllers = [
        Controller(spec, c, config.data_dirs[i], run_dirs[c], config.poll_interval, config.step_timeout)
        for i, c in enumerate(clients)
    ]
    t0 = time.perf_counter()
    try:
        reports = await asyncio.gather(*(ctl.run() for ctl in controllers))
    finally:
        wall = time.perf_counter() - t0
        traffic = server.close_workflow(spec.workflow_id)
        await server.stop()
    status = "ok" if all(r.status == "ok" for r in reports) else "failed"
    metrics = None
    final = reports[0].final_output_dir
    if status == "ok" and final and (Path(final) / "evaluation.json").is_file():
        metrics = json.loads((Path(final) / "evaluation.json").read_text())
    return SimRun(
        repetition=repetition,
        app_seed=app_seed,
        status=status,
        wall_clock=wall,
        reports=dict(zip(clients, reports)),
        traffic={c: {"sent": t.sent, "received": t.received} for c, t in traffic.items()},
        run_dirs=run_dirs,
        transcript=list(core.transcript),
        metrics=metrics,
    )


def run_once(config: SimConfig, repetition: int = 0, work_dir: Optional[Path] = None) -> SimRun:
    work = Path(work_dir or config.work_dir or tempfile.mkdtemp(prefix="fedmesh-sim-"))
    return asyncio.run(_run_once(config, repetition, work))


def run_simulation(config: SimConfig) -> SimulationReport:
    work = Path(config.work_dir or tempfile.mkdtemp(prefix="fedmesh-sim-"))
    runs = [run_once(replace(config, work_dir=work), r, work) for r in range(config.repetitions)]
    return SimulationReport(runs)
