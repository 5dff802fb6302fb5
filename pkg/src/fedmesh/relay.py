"""Star-topology relay.

:class:`RelayCore` holds sessions, routing rules and traffic counters and is
fully synchronous. :class:`RelayServer` puts it behind an asyncio TCP
listener speaking the :mod:`fedmesh.protocol` framing.
"""

from __future__ import annotations

import asyncio
import json
import logging
from dataclasses import dataclass, field
from typing import Optional

from .protocol import (
    RELAY_ID,
    Frame,
    FrameKind,
    Member,
    ProtocolError,
    Role,
    WorkflowSession,
    control,
    encode_frame,
    read_frame,
)
from .testbed.throttle import LinkPacer

logger = logging.getLogger(__name__)


class RelayError(Exception):
    pass


class AuthError(RelayError):
    pass


class TopologyError(RelayError):
    pass


class ConflictError(RelayError):
    pass


class NotFoundError(RelayError):
    pass


class RoutingError(RelayError):
    pass


@dataclass(frozen=True)
class SessionHandle:
    workflow_id: str
    client_id: str
    role: Role


@dataclass
class Traffic:
    sent: int = 0
    received: int = 0


@dataclass
class TranscriptEntry:
    workflow_id: str
    sender: str
    receivers: tuple[str, ...]
    raw: bytes


@dataclass
class _SessionState:
    session: WorkflowSession
    started: bool = False
    failed: bool = False
    traffic: dict[str, Traffic] = field(default_factory=dict)


class RelayCore:
    """Session bookkeeping and routing, independent of any transport."""

    def __init__(self, record: bool = False):
        self._sessions: dict[str, _SessionState] = {}
        self.record = record
        self.transcript: list[TranscriptEntry] = []

    def session(self, workflow_id: str) -> WorkflowSession:
        return self._state(workflow_id).session

    def _state(self, workflow_id: str) -> _SessionState:
        try:
            return self._sessions[workflow_id]
        except KeyError:
            raise NotFoundError(f"unknown workflow {workflow_id!r}") from None

    def register_client(self, workflow_id: str, credentials: str, client_id: str, role: Role) -> SessionHandle:
        role = Role(role)
        if not client_id or client_id == RELAY_ID:
            raise ConflictError(f"invalid client id {client_id!r}")
        state = self._sessions.get(workflow_id)
        if state is None:
            if role is not Role.COORDINATOR:
                raise NotFoundError(f"workflow {workflow_id!r} has no coordinator yet")
            state = _SessionState(WorkflowSession(workflow_id, credentials))
            self._sessions[workflow_id] = state
        elif state.session.credentials != credentials:
            raise AuthError(f"bad credentials for workflow {workflow_id!r}")
        elif role is Role.COORDINATOR and state.session.coordinator is not None:
            raise TopologyError(f"workflow {workflow_id!r} already has a coordinator")
        elif state.session.role_of(client_id) is not None:
            raise ConflictError(f"client {client_id!r} already registered")
        elif state.started:
            raise TopologyError(f"workflow {workflow_id!r} already started; late joins are not allowed")
        state.session.members.append(Member(client_id, role))
        state.traffic[client_id] = Traffic()
        return SessionHandle(workflow_id, client_id, role)

    def route(self, frame: Frame, sender: SessionHandle) -> list[tuple[str, Frame]]:
        state = self._state(sender.workflow_id)
        session = state.session
        if session.role_of(sender.client_id) is not sender.role:
            raise RoutingError(f"{sender.client_id!r} is not registered")
        if frame.sender != sender.client_id:
            raise RoutingError(f"frame claims sender {frame.sender!r} on {sender.client_id!r}'s connection")
        if frame.workflow_id != sender.workflow_id:
            raise RoutingError("frame workflow does not match the connection's workflow")
        if frame.kind is FrameKind.BROADCAST and sender.role is not Role.COORDINATOR:
            raise RoutingError("only the coordinator may broadcast")
        if frame.kind is FrameKind.TO_COORDINATOR and sender.role is not Role.PARTICIPANT:
            raise RoutingError("the coordinator cannot send to itself")

        if sender.role is Role.PARTICIPANT:
            receivers = [session.coordinator]
        else:
            receivers = session.participants
            if frame.kind is FrameKind.CONTROL and frame.meta.get("action") == "start":
                state.started = True

        size = len(encode_frame(frame))
        state.traffic[sender.client_id].sent += size * len(receivers)
        for r in receivers:
            state.traffic[r].received += size
        if self.record and receivers:
            self.transcript.append(
                TranscriptEntry(sender.workflow_id, sender.client_id, tuple(receivers), encode_frame(frame))
            )
        return [(r, frame) for r in receivers]

    def drop_client(self, handle: SessionHandle) -> list[tuple[str, Frame]]:
        """Connection loss: fail the session and tell the remaining members."""
        state = self._sessions.get(handle.workflow_id)
        if state is None:
            return []
        state.failed = True
        note = control(handle.workflow_id, RELAY_ID, "peer-lost", client=handle.client_id)
        if handle.role is Role.PARTICIPANT:
            targets = [state.session.coordinator]
        else:
            targets = [p for p in state.session.participants]
        return [(t, note) for t in targets if t is not None]

    def is_failed(self, workflow_id: str) -> bool:
        return self._state(workflow_id).failed

    def traffic(self, workflow_id: str) -> dict[str, Traffic]:
        state = self._state(workflow_id)
        return {cid: Traffic(t.sent, t.received) for cid, t in state.traffic.items()}

    def close_workflow(self, workflow_id: str) -> dict[str, Traffic]:
        state = self._state(workflow_id)
        del self._sessions[workflow_id]
        return state.traffic


@dataclass
class _Connection:
    handle: SessionHandle
    writer: asyncio.StreamWriter
    queue: asyncio.Queue
    uplink: LinkPacer
    downlink: LinkPacer
    clean_exit: bool = False
    task: Optional[asyncio.Task] = None


class RelayServer:
    """Asyncio TCP front-end for :class:`RelayCore`.

    Registration is the first frame on every connection: a control frame
    with ``meta = {"action": "register", "role": ..., "credentials": ...}``.
    Control frames carrying ``meta["to"] == "@relay"`` are requests to the
    relay itself (``stats``, ``bye``) and are never routed.
    """

    def __init__(self, core: Optional[RelayCore] = None, bandwidth_limit: Optional[float] = None):
        self.core = core or RelayCore()
        self.bandwidth_limit = bandwidth_limit
        self._conns: dict[tuple[str, str], _Connection] = {}
        self._server: Optional[asyncio.base_events.Server] = None
        self.closed_reports: dict[str, dict[str, Traffic]] = {}

    def throttle(self, bandwidth_limit: Optional[float]) -> None:
        """Pace every client link (both directions) at ``bandwidth_limit`` bytes/s."""
        if bandwidth_limit is not None and bandwidth_limit <= 0:
            raise ValueError("bandwidth limit must be positive")
        self.bandwidth_limit = bandwidth_limit
        for conn in self._conns.values():
            conn.uplink = LinkPacer(bandwidth_limit)
            conn.downlink = LinkPacer(bandwidth_limit)

    async def start(self, host: str = "127.0.0.1", port: int = 0) -> tuple[str, int]:
        self._server = await asyncio.start_server(self._handle, host, port)
        sock = self._server.sockets[0]
        return sock.getsockname()[:2]

    @property
    def address(self) -> tuple[str, int]:
        assert self._server is not None
        return self._server.sockets[0].getsockname()[:2]

    async def serve_forever(self) -> None:
        assert self._server is not None
        async with self._server:
            await self._server.serve_forever()

    async def stop(self) -> None:
        if self._server is not None:
            self._server.close()
            await self._server.wait_closed()
        for conn in list(self._conns.values()):
            conn.writer.close()
            if conn.task:
                conn.task.cancel()
        self._conns.clear()

    def close_workflow(self, workflow_id: str) -> dict[str, Traffic]:
        report = self.core.close_workflow(workflow_id)
        for key in [k for k in self._conns if k[0] == workflow_id]:
            conn = self._conns.pop(key)
            conn.clean_exit = True
            conn.writer.close()
        self.closed_reports[workflow_id] = report
        return report

    async def _send_direct(self, writer: asyncio.StreamWriter, frame: Frame) -> None:
        writer.write(encode_frame(frame))
        await writer.drain()

    async def _writer_loop(self, conn: _Connection) -> None:
        try:
            while True:
                raw = await conn.queue.get()
                await conn.downlink.transfer(len(raw))
                conn.writer.write(raw)
                await conn.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass

    def _deliver(self, deliveries: list[tuple[str, Frame]], workflow_id: str) -> None:
        encoded: dict[int, bytes] = {}
        for cid, frame in deliveries:
            conn = self._conns.get((workflow_id, cid))
            if conn is None:
                logger.warning("no live connection for %s/%s; frame dropped", workflow_id, cid)
                continue
            raw = encoded.setdefault(id(frame), encode_frame(frame))
            conn.queue.put_nowait(raw)

    async def _register(self, reader, writer) -> Optional[_Connection]:
        got = await read_frame(reader)
        if got is None:
            return None
        frame, _ = got
        if frame.kind is not FrameKind.CONTROL or frame.meta.get("action") != "register":
            await self._send_direct(writer, control(frame.workflow_id, RELAY_ID, "error", error="expected registration"))
            return None
        try:
            handle = self.core.register_client(
                frame.workflow_id,
                str(frame.meta.get("credentials", "")),
                frame.sender,
                Role(frame.meta.get("role")),
            )
        except (RelayError, ValueError) as exc:
            await self._send_direct(
                writer, control(frame.workflow_id, RELAY_ID, "error", error=f"{type(exc).__name__}: {exc}")
            )
            return None
        conn = _Connection(
            handle,
            writer,
            asyncio.Queue(),
            LinkPacer(self.bandwidth_limit),
            LinkPacer(self.bandwidth_limit),
        )
        self._conns[(handle.workflow_id, handle.client_id)] = conn
        conn.task = asyncio.create_task(self._writer_loop(conn))
        session = self.core.session(handle.workflow_id)
        members = [m.client_id for m in session.members]
        conn.queue.put_nowait(encode_frame(control(handle.workflow_id, RELAY_ID, "registered", members=members)))
        if handle.role is Role.PARTICIPANT and session.coordinator is not None:
            self._deliver(
                [(session.coordinator, control(handle.workflow_id, RELAY_ID, "joined", client=handle.client_id))],
                handle.workflow_id,
            )
        return conn

    def _relay_request(self, conn: _Connection, frame: Frame) -> None:
        action = frame.meta.get("action")
        wf = conn.handle.workflow_id
        if action == "bye":
            conn.clean_exit = True
        elif action == "stats":
            traffic = self.core.traffic(wf)
            body = json.dumps({c: [t.sent, t.received] for c, t in traffic.items()}).encode()
            conn.queue.put_nowait(encode_frame(control(wf, RELAY_ID, "stats", payload=body)))

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        conn = None
        try:
            conn = await self._register(reader, writer)
            if conn is None:
                return
            while True:
                got = await read_frame(reader)
                if got is None:
                    break
                frame, size = got
                await conn.uplink.transfer(size)
                if frame.kind is FrameKind.CONTROL and frame.meta.get("to") == RELAY_ID:
                    self._relay_request(conn, frame)
                    continue
                try:
                    deliveries = self.core.route(frame, conn.handle)
                except (RelayError, ProtocolError) as exc:
                    logger.warning("rejected frame from %s: %s", conn.handle.client_id, exc)
                    conn.queue.put_nowait(
                        encode_frame(control(conn.handle.workflow_id, RELAY_ID, "error", error=str(exc)))
                    )
                    continue
                self._deliver(deliveries, conn.handle.workflow_id)
        except (ProtocolError, ConnectionError, asyncio.IncompleteReadError) as exc:
            logger.warning("connection error: %s", exc)
        finally:
            if conn is not None:
                key = (conn.handle.workflow_id, conn.handle.client_id)
                live = self._conns.get(key) is conn
                if live and not conn.clean_exit:
                    self._deliver(self.core.drop_client(conn.handle), conn.handle.workflow_id)
                if live:
                    # let queued frames reach the peer before closing
                    while not conn.queue.empty() and not writer.is_closing():
                        await asyncio.sleep(0.001)
                    self._conns.pop(key, None)
                if conn.task:
                    conn.task.cancel()
            writer.close()
