"""Tagged binary payloads exchanged between app instances.

Layout::

    b"FMP" + version (1 byte, currently 1)
    header_len         4 bytes, big-endian unsigned
    header             UTF-8 JSON: {"kind": str, "fields": {...},
                                    "arrays": [[name, dtype, shape], ...]}
    array bodies       concatenated in header order, C order, the
                       dtype's explicit byte order (always little-endian)

Dtypes used by the bundled apps: ``<f8`` (reals), ``<u8`` (fixed-point
SMPC vectors), ``<i4`` (tree feature indices), ``<i8`` (counts).
Scalars, ids and small lists ride in ``fields``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Any

import numpy as np

MAGIC = b"FMP"
VERSION = 1
_ALLOWED = {"<f8", "<u8", "<i4", "<i8", "|u1"}


class PayloadError(ValueError):
    """Payload bytes that do not parse as the expected message."""


@dataclass
class Message:
    kind: str
    fields: dict[str, Any] = field(default_factory=dict)
    arrays: dict[str, np.ndarray] = field(default_factory=dict)

    def __getitem__(self, key: str) -> Any:
        if key in self.arrays:
            return self.arrays[key]
        return self.fields[key]


def pack(kind: str, arrays: dict[str, np.ndarray] | None = None, **fields: Any) -> bytes:
    arrays = arrays or {}
    specs = []
    bodies = []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.byteorder not in ("|", "<") else arr.dtype
        code = dt.str
        if code not in _ALLOWED:
            raise PayloadError(f"unsupported dtype {arr.dtype} for {name!r}")
        specs.append([name, code, list(arr.shape)])
        bodies.append(np.ascontiguousarray(arr, dtype=dt).tobytes())
    header = json.dumps({"kind": kind, "fields": fields, "arrays": specs}, separators=(",", ":")).encode()
    return MAGIC + bytes([VERSION]) + struct.pack(">I", len(header)) + header + b"".join(bodies)


def unpack(data: bytes, expect: str | tuple[str, ...] | None = None) -> Message:
    if len(data) < 8 or data[:3] != MAGIC:
        raise PayloadError("not a fedmesh payload")
    if data[3] != VERSION:
        raise PayloadError(f"unsupported payload version {data[3]}")
    (hlen,) = struct.unpack_from(">I", data, 4)
    try:
        header = json.loads(data[8 : 8 + hlen].decode())
        kind = header["kind"]
    except (ValueError, KeyError) as exc:
        raise PayloadError(f"bad payload header: {exc}") from exc
    if expect is not None:
        allowed = (expect,) if isinstance(expect, str) else expect
        if kind not in allowed:
            raise PayloadError(f"expected payload kind {allowed}, got {kind!r}")
    offset = 8 + hlen
    arrays = {}
    for name, code, shape in header["arrays"]:
        if code not in _ALLOWED:
            raise PayloadError(f"unsupported dtype {code}")
        dt = np.dtype(code)
        count = int(np.prod(shape, dtype=np.int64))
        nbytes = count * dt.itemsize
        if offset + nbytes > len(data):
            raise PayloadError(f"array {name!r} truncated")
        arrays[name] = np.frombuffer(data, dtype=dt, count=count, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(data):
        raise PayloadError("trailing bytes after payload arrays")
    return Message(kind, header.get("fields", {}), arrays)
