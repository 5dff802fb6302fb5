"""Client-side workflow controller.

One controller per client: it registers with the relay, then runs the
workflow's app steps in order. Step ``i`` reads the directory step ``i-1``
wrote. Within a step it polls the app every ``poll_interval`` seconds,
forwards advertised data through the relay and hands relayed data back to
the app as it arrives.

Control frames used between controllers (``meta["action"]``):

``start``           coordinator -> all, registration is closed
``finished``        participant -> coordinator, app of step k finished
``step-complete``   coordinator -> all, barrier for step k
``failed``          participant -> coordinator, app of step k failed
``abort``           coordinator -> all, workflow failed
"""

from __future__ import annotations

import asyncio
import json
import logging
import os
import stat
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Optional

import yaml

from .app_engine import App, AppError, SetupInfo, create_app
from .protocol import RELAY_ID, Frame, FrameKind, IntegrityError, Role, control, encode_frame, read_frame

logger = logging.getLogger(__name__)

DEFAULT_POLL_INTERVAL = 3.0


class WorkflowError(Exception):
    pass


class ConfigError(WorkflowError):
    pass


class StepFailure(WorkflowError):
    pass


@dataclass
class StepSpec:
    app: str
    config: dict = field(default_factory=dict)


@dataclass
class WorkflowSpec:
    workflow_id: str
    steps: list[StepSpec]
    clients: list[str]
    coordinator: str
    relay: str = "127.0.0.1:7700"
    credentials: str = ""
    defaults: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.steps:
            raise ConfigError("a workflow needs at least one step")
        if self.coordinator not in self.clients:
            raise ConfigError(f"coordinator {self.coordinator!r} is not among clients {self.clients}")
        if len(set(self.clients)) != len(self.clients):
            raise ConfigError("client ids must be unique")

    def role_of(self, client_id: str) -> Role:
        if client_id not in self.clients:
            raise ConfigError(f"{client_id!r} is not a client of workflow {self.workflow_id!r}")
        return Role.COORDINATOR if client_id == self.coordinator else Role.PARTICIPANT

    def step_config(self, index: int) -> dict:
        return {**self.defaults, **self.steps[index].config}

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "WorkflowSpec":
        try:
            steps = []
            for s in raw["steps"]:
                if isinstance(s, str):
                    steps.append(StepSpec(s))
                else:
                    steps.append(StepSpec(s["app"], dict(s.get("config") or {})))
            clients = [str(c) for c in raw["clients"]]
            return cls(
                workflow_id=str(raw["workflow_id"]),
                steps=steps,
                clients=clients,
                coordinator=str(raw.get("coordinator", clients[0])),
                relay=str(raw.get("relay", "127.0.0.1:7700")),
                credentials=str(raw.get("credentials", "")),
                defaults=dict(raw.get("defaults") or {}),
            )
        except (KeyError, TypeError, IndexError) as exc:
            raise ConfigError(f"invalid workflow description: {exc!r}") from exc


def load_workflow(path) -> WorkflowSpec:
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read workflow file {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"workflow file {path} must hold a mapping")
    return WorkflowSpec.from_dict(raw)


@dataclass
class StepContext:
    index: int
    app: str
    input_dir: Path
    output_dir: Path
    logs: list[str] = field(default_factory=list)


def first_context(run_dir: Path, data_dir: Path, app: str) -> StepContext:
    out = Path(run_dir) / f"step_00_{app}" / "output"
    out.mkdir(parents=True, exist_ok=True)
    return StepContext(0, app, Path(data_dir), out)


def _make_read_only(root: Path) -> None:
    for dirpath, _, files in os.walk(root):
        for name in files:
            p = Path(dirpath) / name
            p.chmod(p.stat().st_mode & ~(stat.S_IWUSR | stat.S_IWGRP | stat.S_IWOTH))


def chain_outputs(ctx: StepContext, run_dir: Path, next_app: str) -> StepContext:
    """Freeze step ``ctx.index``'s output and open a fresh one for the next step."""
    _make_read_only(ctx.output_dir)
    i = ctx.index + 1
    out = Path(run_dir) / f"step_{i:02d}_{next_app}" / "output"
    out.mkdir(parents=True, exist_ok=True)
    return StepContext(i, next_app, ctx.output_dir, out)


@dataclass
class StepResult:
    index: int
    app: str
    status: str
    seconds: float
    output_dir: str
    error: Optional[str] = None


@dataclass
class RunReport:
    workflow_id: str
    client_id: str
    role: str
    status: str = "running"
    failed_step: Optional[int] = None
    error: Optional[str] = None
    steps: list[StepResult] = field(default_factory=list)
    traffic: dict[str, dict[str, int]] = field(default_factory=dict)
    wall_clock: float = 0.0
    final_output_dir: Optional[str] = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "RunReport":
        raw = dict(raw)
        raw["steps"] = [StepResult(**s) for s in raw.get("steps", [])]
        return cls(**raw)

    def table(self) -> str:
        lines = [
            f"workflow {self.workflow_id}  client {self.client_id} ({self.role})  status {self.status}"
            + (f" at step {self.failed_step}" if self.failed_step is not None else ""),
            f"{'step':>4}  {'app':<24} {'status':<8} {'seconds':>9}",
        ]
        for s in self.steps:
            lines.append(f"{s.index:>4}  {s.app:<24} {s.status:<8} {s.seconds:>9.3f}")
        if self.traffic:
            lines.append(f"{'client':<16} {'sent':>12} {'received':>12}")
            for cid, t in self.traffic.items():
                lines.append(f"{cid:<16} {t['sent']:>12} {t['received']:>12}")
        if self.error:
            lines.append(f"error: {self.error}")
        return "\n".join(lines)


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"relay address must be host:port, got {addr!r}")
    return host, int(port)


class RelayLink:
    """A registered relay connection plus the reader that demultiplexes it."""

    def __init__(self, workflow_id: str, client_id: str, role: Role):
        self.workflow_id = workflow_id
        self.client_id = client_id
        self.role = role
        self.members: list[str] = []
        self.reader: Optional[asyncio.StreamReader] = None
        self.writer: Optional[asyncio.StreamWriter] = None
        self.inbox: asyncio.Queue = asyncio.Queue()
        self.controls: asyncio.Queue = asyncio.Queue()
        self.stats_reply: asyncio.Queue = asyncio.Queue()
        self.closed = asyncio.Event()
        self._task: Optional[asyncio.Task] = None

    async def connect(self, host: str, port: int, credentials: str, timeout: float = 30.0) -> None:
        deadline = time.monotonic() + timeout
        last = None
        while True:
            try:
                self.reader, self.writer = await asyncio.open_connection(host, port)
                await self._send_raw(
                    control(self.workflow_id, self.client_id, "register", role=self.role.value, credentials=credentials)
                )
                got = await read_frame(self.reader)
                if got is None:
                    raise ConnectionError("relay closed the connection during registration")
                reply, _ = got
                if reply.meta.get("action") == "registered":
                    self.members = list(reply.meta.get("members", []))
                    break
                last = reply.meta.get("error", "registration refused")
                self.writer.close()
                # participants may arrive before the coordinator created the session
                if "NotFoundError" not in str(last):
                    raise WorkflowError(f"relay refused registration: {last}")
            except OSError as exc:
                last = exc
            if time.monotonic() > deadline:
                raise WorkflowError(f"could not register with relay at {host}:{port}: {last}")
            await asyncio.sleep(0.05)
        self._task = asyncio.create_task(self._read_loop())

    async def _send_raw(self, frame: Frame) -> None:
        assert self.writer is not None
        self.writer.write(encode_frame(frame))
        await self.writer.drain()

    async def send(self, payload: bytes, step: int) -> None:
        kind = FrameKind.BROADCAST if self.role is Role.COORDINATOR else FrameKind.TO_COORDINATOR
        await self._send_raw(
            Frame(self.workflow_id, self.client_id, kind, payload, declared_size=len(payload), meta={"step": step})
        )

    async def send_control(self, action: str, **meta: Any) -> None:
        await self._send_raw(control(self.workflow_id, self.client_id, action, **meta))

    async def traffic(self) -> dict[str, dict[str, int]]:
        await self.send_control("stats", to=RELAY_ID)
        frame = await asyncio.wait_for(self.stats_reply.get(), 10.0)
        raw = json.loads(frame.payload)
        return {cid: {"sent": v[0], "received": v[1]} for cid, v in raw.items()}

    async def _read_loop(self) -> None:
        try:
            while True:
                got = await read_frame(self.reader)
                if got is None:
                    break
                frame, _ = got
                if frame.kind is FrameKind.CONTROL:
                    if frame.sender == RELAY_ID and frame.meta.get("action") == "stats":
                        self.stats_reply.put_nowait(frame)
                    else:
                        self.controls.put_nowait(frame)
                else:
                    self.inbox.put_nowait(frame)
        except (ConnectionError, IntegrityError, asyncio.IncompleteReadError, Exception) as exc:  # noqa: BLE001
            logger.warning("%s: relay connection error: %s", self.client_id, exc)
        finally:
            self.closed.set()
            self.controls.put_nowait(control(self.workflow_id, RELAY_ID, "disconnected"))

    async def close(self) -> None:
        if self.writer is not None and not self.writer.is_closing():
            try:
                await self.send_control("bye", to=RELAY_ID)
            except ConnectionError:
                pass
            self.writer.close()
        if self._task is not None:
            self._task.cancel()


class Controller:
    def __init__(
        self,
        spec: WorkflowSpec,
        client_id: str,
        data_dir,
        run_dir,
        poll_interval: Optional[float] = None,
        step_timeout: float = 600.0,
        app_factory: Callable[[str], App] = create_app,
    ):
        self.spec = spec
        self.client_id = client_id
        self.role = spec.role_of(client_id)
        self.master = self.role is Role.COORDINATOR
        self.data_dir = Path(data_dir)
        self.run_dir = Path(run_dir)
        self.poll_interval = DEFAULT_POLL_INTERVAL if poll_interval is None else float(poll_interval)
        self.step_timeout = step_timeout
        self.app_factory = app_factory
        self.link = RelayLink(spec.workflow_id, client_id, self.role)
        self._executor = ThreadPoolExecutor(max_workers=1, thread_name_prefix=f"app-{client_id}")
        self._buffers: dict[int, list[Frame]] = {}
        self._controls: list[Frame] = []
        self.report = RunReport(spec.workflow_id, client_id, self.role.value)

    async def _call(self, fn, *args):
        return await asyncio.get_running_loop().run_in_executor(self._executor, fn, *args)

    # -- control-frame bookkeeping ------------------------------------------

    def _drain_controls(self) -> None:
        while not self.link.controls.empty():
            self._controls.append(self.link.controls.get_nowait())

    def _check_abort(self) -> None:
        self._drain_controls()
        for f in self._controls:
            action = f.meta.get("action")
            if action in ("abort", "peer-lost", "disconnected"):
                raise StepFailure(f"{action} ({f.sender}): {f.meta.get('error') or f.meta.get('client') or ''}".strip())
            if action == "failed" and self.master:
                raise StepFailure(f"participant {f.sender} failed at step {f.meta.get('step')}: {f.meta.get('error')}")
            if action == "error" and f.sender == RELAY_ID:
                raise StepFailure(f"relay rejected a frame: {f.meta.get('error')}")

    def _take_control(self, action: str, **match) -> Optional[Frame]:
        self._drain_controls()
        for i, f in enumerate(self._controls):
            if f.meta.get("action") == action and all(f.meta.get(k) == v for k, v in match.items()):
                return self._controls.pop(i)
        return None

    async def _wait_control(self, action: str, timeout: float, **match) -> Frame:
        deadline = time.monotonic() + timeout
        while True:
            got = self._take_control(action, **match)
            if got is not None:
                return got
            self._check_abort()
            if time.monotonic() > deadline:
                raise StepFailure(f"timed out waiting for {action!r}")
            try:
                self._controls.append(await asyncio.wait_for(self.link.controls.get(), max(0.0, deadline - time.monotonic())))
            except asyncio.TimeoutError:
                pass

    # -- session start --------------------------------------------------------

    async def _start_session(self, timeout: float) -> None:
        if self.master:
            expected = set(self.spec.clients) - {self.client_id}
            joined = set(self.link.members) - {self.client_id}
            deadline = time.monotonic() + timeout
            while not expected <= joined:
                f = self._take_control("joined")
                if f is not None:
                    joined.add(f.meta.get("client"))
                    continue
                self._check_abort()
                if time.monotonic() > deadline:
                    raise StepFailure(f"participants never joined: {sorted(expected - joined)}")
                try:
                    self._controls.append(await asyncio.wait_for(self.link.controls.get(), 0.1))
                except asyncio.TimeoutError:
                    pass
            unknown = joined - set(self.spec.clients)
            if unknown:
                raise StepFailure(f"unexpected clients joined: {sorted(unknown)}")
            await self.link.send_control("start")
        else:
            await self._wait_control("start", timeout)

    # -- one step ------------------------------------------------------------

    async def _pump(self, step: int, app: App, errors: list) -> None:
        """Deliver relayed frames of ``step`` to ``app`` in arrival order."""
        for frame in self._buffers.pop(step, []):
            await self._deliver(app, frame, errors)
        while True:
            frame = await self.link.inbox.get()
            fstep = frame.meta.get("step")
            if fstep != step:
                self._buffers.setdefault(fstep, []).append(frame)
                continue
            await self._deliver(app, frame, errors)

    async def _deliver(self, app: App, frame: Frame, errors: list) -> None:
        if errors:
            return
        sender = frame.sender if self.master else None
        try:
            await self._call(app.deliver_incoming, frame.payload, sender)
        except Exception as exc:  # noqa: BLE001
            errors.append(exc)

    async def drive_app_step(self, app: App, ctx: StepContext) -> None:
        info = SetupInfo(self.client_id, self.master, list(self.spec.clients))
        errors: list[Exception] = []
        try:
            await self._call(app.setup, info, ctx.input_dir, ctx.output_dir, self.spec.step_config(ctx.index))
        except Exception as exc:  # noqa: BLE001
            await self._report_failure(ctx.index, exc)
            raise StepFailure(f"setup of {ctx.app} failed: {exc}") from exc
        pump = asyncio.create_task(self._pump(ctx.index, app, errors))
        participants = set(self.spec.clients) - {self.client_id}
        finished_peers: set[str] = set()
        sent_finished = False
        deadline = time.monotonic() + self.step_timeout
        try:
            while True:
                if errors:
                    await self._report_failure(ctx.index, errors[0])
                    raise StepFailure(f"{ctx.app} failed: {errors[0]}") from errors[0]
                self._check_abort()
                st = app.status()
                while st.available:
                    data = app.fetch_outgoing()
                    if st.size is not None and st.size != len(data):
                        raise StepFailure(f"{ctx.app} advertised {st.size} bytes but returned {len(data)}")
                    await self.link.send(data, ctx.index)
                    st = app.status()
                if self.master:
                    while (f := self._take_control("finished", step=ctx.index)) is not None:
                        finished_peers.add(f.sender)
                    if st.finished and finished_peers >= participants:
                        await self.link.send_control("step-complete", step=ctx.index)
                        break
                else:
                    if st.finished and not sent_finished:
                        await self.link.send_control("finished", step=ctx.index)
                        sent_finished = True
                    if sent_finished and self._take_control("step-complete", step=ctx.index):
                        break
                if time.monotonic() > deadline:
                    raise StepFailure(f"{ctx.app} exceeded the step timeout of {self.step_timeout}s")
                await asyncio.sleep(self._until_next_tick())
        except StepFailure as exc:
            if not errors:
                await self._report_failure(ctx.index, exc)
            raise
        finally:
            pump.cancel()
            ctx.logs.extend(getattr(app, "log_lines", []))

    def _until_next_tick(self) -> float:
        """Seconds to the next multiple of the poll interval on the wall clock.

        Sharing one tick grid keeps every client polling in phase, so the
        number of ticks a round needs does not depend on start-up jitter.
        """
        if self.poll_interval <= 0:
            return 0.0
        return self.poll_interval - (time.time() % self.poll_interval)

    async def _report_failure(self, step: int, exc: BaseException) -> None:
        try:
            if self.master:
                await self.link.send_control("abort", step=step, error=str(exc)[:2000])
            else:
                await self.link.send_control("failed", step=step, error=str(exc)[:2000])
        except (ConnectionError, RuntimeError):
            pass

    # -- whole workflow -----------------------------------------------------

    async def run(self, connect_timeout: float = 30.0) -> RunReport:
        t0 = time.perf_counter()
        host, port = parse_address(self.spec.relay)
        ctx: Optional[StepContext] = None
        try:
            await self.link.connect(host, port, self.spec.credentials, connect_timeout)
            await self._start_session(connect_timeout)
            for i, step in enumerate(self.spec.steps):
                ctx = first_context(self.run_dir, self.data_dir, step.app) if ctx is None else chain_outputs(ctx, self.run_dir, step.app)
                t_step = time.perf_counter()
                try:
                    app = self.app_factory(step.app)
                    await self.drive_app_step(app, ctx)
                except (StepFailure, AppError) as exc:
                    self.report.steps.append(
                        StepResult(i, step.app, "failed", time.perf_counter() - t_step, str(ctx.output_dir), str(exc))
                    )
                    self.report.status = "failed"
                    self.report.failed_step = i
                    self.report.error = str(exc)
                    break
                finally:
                    self._write_log(ctx)
                self.report.steps.append(
                    StepResult(i, step.app, "ok", time.perf_counter() - t_step, str(ctx.output_dir))
                )
            else:
                self.report.status = "ok"
                self.report.final_output_dir = str(ctx.output_dir)
            if not self.link.closed.is_set():
                try:
                    self.report.traffic = await self.link.traffic()
                except (asyncio.TimeoutError, ConnectionError):
                    pass
        except (WorkflowError, OSError) as exc:
            self.report.status = "failed"
            self.report.error = str(exc)
        finally:
            await self.link.close()
            self._executor.shutdown(wait=False)
            self.report.wall_clock = time.perf_counter() - t0
            self.run_dir.mkdir(parents=True, exist_ok=True)
            (self.run_dir / "run_report.json").write_text(json.dumps(self.report.to_dict(), indent=2))
        return self.report

    def _write_log(self, ctx: StepContext) -> None:
        log = ctx.output_dir.parent / "app.log"
        log.write_text("\n".join(ctx.logs) + ("\n" if ctx.logs else ""))


async def run_workflow(
    spec: WorkflowSpec,
    client_id: str,
    data_dir,
    run_dir,
    poll_interval: Optional[float] = None,
    step_timeout: float = 600.0,
) -> RunReport:
    return await Controller(spec, client_id, data_dir, run_dir, poll_interval, step_timeout).run()
