"""Identities, roles and the length-prefixed wire framing.

Layout of one encoded frame::

    b"FCW1"                      4 bytes magic
    header_len                   4 bytes, big-endian unsigned
    header                       header_len bytes, UTF-8 JSON object
    payload_len                  8 bytes, big-endian unsigned
    payload                      payload_len bytes, opaque

The header object carries ``workflow_id``, ``sender``, ``kind``,
``declared_size`` (int or null) and ``meta`` (a flat string-keyed object
used by control frames, e.g. registration credentials).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from typing import Any, Optional

MAGIC = b"FCW1"
MAX_HEADER = 64 * 1024
_HLEN = struct.Struct(">I")
_PLEN = struct.Struct(">Q")
PREFIX_LEN = len(MAGIC) + _HLEN.size

RELAY_ID = "@relay"


class ProtocolError(Exception):
    """Malformed frame or a frame that violates the framing rules."""


class EncodingError(ProtocolError):
    pass


class IntegrityError(ProtocolError):
    """Declared payload size does not match the payload."""


class Role(str, enum.Enum):
    COORDINATOR = "coordinator"
    PARTICIPANT = "participant"


class FrameKind(str, enum.Enum):
    TO_COORDINATOR = "to_coordinator"
    BROADCAST = "broadcast"
    CONTROL = "control"


@dataclass(frozen=True)
class Member:
    client_id: str
    role: Role


@dataclass
class WorkflowSession:
    workflow_id: str
    credentials: str
    members: list[Member] = field(default_factory=list)

    @property
    def n_participants(self) -> int:
        return len(self.members)

    @property
    def coordinator(self) -> Optional[str]:
        for m in self.members:
            if m.role is Role.COORDINATOR:
                return m.client_id
        return None

    @property
    def participants(self) -> list[str]:
        return [m.client_id for m in self.members if m.role is Role.PARTICIPANT]

    def role_of(self, client_id: str) -> Optional[Role]:
        for m in self.members:
            if m.client_id == client_id:
                return m.role
        return None


@dataclass
class Frame:
    workflow_id: str
    sender: str
    kind: FrameKind
    payload: bytes = b""
    declared_size: Optional[int] = None
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.kind = FrameKind(self.kind)
        self.payload = bytes(self.payload)


def validate_frame(frame: Frame) -> None:
    if not frame.workflow_id:
        raise EncodingError("empty workflow_id")
    if not frame.sender:
        raise EncodingError("empty sender")
    if frame.declared_size is not None and frame.declared_size != len(frame.payload):
        raise IntegrityError(
            f"declared_size {frame.declared_size} != payload length {len(frame.payload)}"
        )


def encode_frame(frame: Frame) -> bytes:
    validate_frame(frame)
    fields: dict[str, Any] = {"workflow_id": frame.workflow_id, "sender": frame.sender, "kind": frame.kind.value}
    # optional keys are left out when unset to keep small frames small
    if frame.declared_size is not None:
        fields["declared_size"] = frame.declared_size
    if frame.meta:
        fields["meta"] = frame.meta
    header = json.dumps(
        fields,
        separators=(",", ":"),
        sort_keys=True,
    ).encode("utf-8")
    if len(header) > MAX_HEADER:
        raise EncodingError(f"header of {len(header)} bytes exceeds {MAX_HEADER}")
    return b"".join(
        (MAGIC, _HLEN.pack(len(header)), header, _PLEN.pack(len(frame.payload)), frame.payload)
    )


def encoded_size(frame: Frame) -> int:
    return len(encode_frame(frame))


def decode_frame(buf: bytes | bytearray | memoryview) -> tuple[Optional[Frame], int]:
    """Decode one frame from the start of ``buf``.

    Returns ``(frame, consumed)``. When ``buf`` holds only part of a frame
    the result is ``(None, 0)`` and nothing is consumed.
    """
    view = memoryview(buf)
    head = bytes(view[: len(MAGIC)])
    if head != MAGIC[: len(head)]:
        raise ProtocolError(f"bad magic {head!r}")
    if len(view) < PREFIX_LEN:
        return None, 0
    (hlen,) = _HLEN.unpack_from(view, len(MAGIC))
    if hlen > MAX_HEADER:
        raise ProtocolError(f"header length {hlen} exceeds {MAX_HEADER}")
    plen_at = PREFIX_LEN + hlen
    if len(view) < plen_at + _PLEN.size:
        return None, 0
    (plen,) = _PLEN.unpack_from(view, plen_at)
    end = plen_at + _PLEN.size + plen
    if len(view) < end:
        return None, 0
    try:
        header = json.loads(bytes(view[PREFIX_LEN:plen_at]).decode("utf-8"))
        kind = FrameKind(header["kind"])
        workflow_id = header["workflow_id"]
        sender = header["sender"]
    except (ValueError, KeyError, TypeError) as exc:
        raise ProtocolError(f"malformed header: {exc}") from exc
    payload = bytes(view[plen_at + _PLEN.size : end])
    declared = header.get("declared_size")
    if declared is not None and declared != len(payload):
        raise IntegrityError(f"declared_size {declared} != payload length {len(payload)}")
    frame = Frame(
        workflow_id=workflow_id,
        sender=sender,
        kind=kind,
        payload=payload,
        declared_size=declared,
        meta=header.get("meta") or {},
    )
    return frame, end


def decode_stream(buf: bytes) -> tuple[list[Frame], int]:
    """Decode as many complete frames as ``buf`` holds."""
    frames = []
    offset = 0
    while offset < len(buf):
        frame, used = decode_frame(memoryview(buf)[offset:])
        if frame is None:
            break
        frames.append(frame)
        offset += used
    return frames, offset


async def read_frame(reader) -> Optional[tuple[Frame, int]]:
    """Read one frame from an asyncio stream; ``None`` on clean EOF."""
    import asyncio

    try:
        prefix = await reader.readexactly(PREFIX_LEN)
    except asyncio.IncompleteReadError as exc:
        if not exc.partial:
            return None
        raise ProtocolError("connection closed mid-frame") from exc
    if prefix[:4] != MAGIC:
        raise ProtocolError(f"bad magic {prefix[:4]!r}")
    (hlen,) = _HLEN.unpack_from(prefix, 4)
    if hlen > MAX_HEADER:
        raise ProtocolError(f"header length {hlen} exceeds {MAX_HEADER}")
    header = await reader.readexactly(hlen)
    plen_raw = await reader.readexactly(_PLEN.size)
    (plen,) = _PLEN.unpack(plen_raw)
    payload = await reader.readexactly(plen)
    raw = prefix + header + plen_raw + payload
    frame, used = decode_frame(raw)
    assert frame is not None
    return frame, used


def control(workflow_id: str, sender: str, action: str, payload: bytes = b"", **meta: Any) -> Frame:
    return Frame(
        workflow_id=workflow_id,
        sender=sender,
        kind=FrameKind.CONTROL,
        payload=payload,
        meta={"action": action, **meta},
    )
