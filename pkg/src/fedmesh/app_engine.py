"""The four-call app contract and a generator-driven base for federated apps.

The controller is the only caller of an app. It calls :meth:`App.setup`
once, then polls :meth:`App.status`, pulls advertised data with
:meth:`App.fetch_outgoing` and pushes relayed data in with
:meth:`App.deliver_incoming`. Apps never touch the network.

:class:`FederatedApp` lets an app be written as straight-line code::

    class Mean(FederatedApp):
        def run(self):
            local = load(...)
            parts = yield from self.gather(encode(local))
            total = yield from self.broadcast(encode(sum(parts)) if self.master else None)
            write(total)

Every ``yield`` hands a communication request to the engine, which
suspends the program until the matching data has been delivered.
"""

from __future__ import annotations

import enum
import logging
import threading
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Callable, Generator, Optional

import numpy as np

from . import payload, smpc

logger = logging.getLogger(__name__)


class AppError(Exception):
    """The app failed; the controller fails the step."""


class SetupError(AppError):
    pass


class ContractError(AppError):
    """A call that the app contract does not allow in the current state."""


class AppStage(enum.Enum):
    AWAITING_SETUP = "awaiting_setup"
    LOCAL_COMPUTE = "local_compute"
    AWAITING_GLOBAL = "awaiting_global"
    FINISHED = "finished"


@dataclass
class SetupInfo:
    id: str
    master: bool
    clients: list[str]

    def __post_init__(self) -> None:
        if self.id not in self.clients:
            raise ContractError(f"instance id {self.id!r} is not in clients {self.clients}")


@dataclass(frozen=True)
class StatusReport:
    available: bool
    finished: bool
    size: Optional[int] = None


class App:
    """Abstract app: the four calls the controller drives."""

    def setup(self, info: SetupInfo, input_dir: Path, output_dir: Path, config: dict) -> None:
        raise NotImplementedError

    def status(self) -> StatusReport:
        raise NotImplementedError

    def fetch_outgoing(self) -> bytes:
        raise NotImplementedError

    def deliver_incoming(self, data: bytes, sender: Optional[str] = None) -> None:
        raise NotImplementedError


APPS: dict[str, Callable[[], App]] = {}


def register_app(name: str):
    def deco(cls):
        cls.app_name = name
        APPS[name] = cls
        return cls

    return deco


def create_app(name: str) -> App:
    if name not in APPS:
        # The bundled apps register themselves on import.
        import importlib

        importlib.import_module("fedmesh.fed_ml.apps")
    try:
        factory = APPS[name]
    except KeyError:
        raise SetupError(f"unknown app {name!r}; known apps: {sorted(APPS)}") from None
    return factory()


@dataclass
class _Send:
    data: bytes


@dataclass
class _Wait:
    """Participant: one broadcast. Coordinator: one packet from each participant."""


Program = Generator[Any, Any, None]


class FederatedApp(App):
    """Base class running :meth:`run` as a suspended program.

    Subclasses read ``self.input_dir``, ``self.output_dir``, ``self.config``,
    ``self.id``, ``self.master`` and ``self.clients`` and use the helpers
    :meth:`gather`, :meth:`broadcast` and :meth:`secure_sum`.
    """

    app_name = "app"

    def __init__(self) -> None:
        self.stage = AppStage.AWAITING_SETUP
        self._lock = threading.Lock()
        self._outbox: deque[bytes] = deque()
        self._from_coordinator: deque[bytes] = deque()
        self._from_participants: dict[str, deque[bytes]] = {}
        self._program: Optional[Program] = None
        self._done = False
        self._status = StatusReport(False, False)
        self.log_lines: list[str] = []
        self._smpc_keys: Optional[smpc.KeyPair] = None
        self._key_directory: dict[str, bytes] = {}
        self._smpc_round = 0

    # -- the four calls --------------------------------------------------

    def setup(self, info: SetupInfo, input_dir, output_dir, config: Optional[dict] = None) -> None:
        if self.stage is not AppStage.AWAITING_SETUP:
            raise ContractError(f"setup called in stage {self.stage.value}")
        self.info = info
        self.id = info.id
        self.master = info.master
        self.clients = list(info.clients)
        self.participants = [c for c in self.clients if c != self.id] if self.master else []
        self.input_dir = Path(input_dir)
        self.output_dir = Path(output_dir)
        self.config = dict(config or {})
        self._from_participants = {c: deque() for c in self.participants}
        if not self.input_dir.is_dir() or not any(self.input_dir.iterdir()):
            raise SetupError(f"no input: {self.input_dir} is missing or empty")
        self.output_dir.mkdir(parents=True, exist_ok=True)
        self.stage = AppStage.LOCAL_COMPUTE
        self._program = self.run()
        try:
            self._advance(None)
        except AppError:
            raise
        except (OSError, ValueError, KeyError) as exc:
            raise SetupError(f"{type(exc).__name__}: {exc}") from exc

    def status(self) -> StatusReport:
        return self._status

    def fetch_outgoing(self) -> bytes:
        with self._lock:
            if not self._outbox:
                raise ContractError("fetch_outgoing called with no data available")
            data = self._outbox.popleft()
            self._refresh_status()
        return data

    def deliver_incoming(self, data: bytes, sender: Optional[str] = None) -> None:
        if self.stage is AppStage.AWAITING_SETUP:
            raise ContractError("data delivered before setup")
        if self.stage is AppStage.FINISHED:
            raise ContractError("data delivered after the app finished")
        if self.master:
            if sender not in self._from_participants:
                raise AppError(f"packet from unknown client {sender!r}")
            self._from_participants[sender].append(bytes(data))
            ready = all(self._from_participants.values())
        else:
            if sender is not None:
                raise ContractError("participants only receive coordinator broadcasts")
            self._from_coordinator.append(bytes(data))
            ready = True
        if ready and self.stage is AppStage.AWAITING_GLOBAL:
            self.stage = AppStage.LOCAL_COMPUTE
            self._advance(self._take_wait())

    # -- engine ------------------------------------------------------------

    def run(self) -> Program:
        raise NotImplementedError

    def _take_wait(self):
        if self.master:
            return {c: q.popleft() for c, q in self._from_participants.items()}
        return self._from_coordinator.popleft()

    def _refresh_status(self) -> None:
        avail = bool(self._outbox)
        self._status = StatusReport(
            available=avail,
            finished=self._done and not avail,
            size=len(self._outbox[0]) if avail else None,
        )

    def _advance(self, value) -> None:
        assert self._program is not None
        try:
            while True:
                request = self._program.send(value)
                value = None
                if isinstance(request, _Send):
                    with self._lock:
                        self._outbox.append(request.data)
                        self._refresh_status()
                elif isinstance(request, _Wait):
                    ready = all(self._from_participants.values()) if self.master else bool(self._from_coordinator)
                    if ready:
                        value = self._take_wait()
                        continue
                    self.stage = AppStage.AWAITING_GLOBAL
                    return
                else:
                    raise AppError(f"app yielded unsupported request {request!r}")
        except StopIteration:
            self.stage = AppStage.FINISHED
            with self._lock:
                self._done = True
                self._refresh_status()
        except AppError:
            raise
        except Exception as exc:
            raise AppError(f"{self.app_name} failed: {type(exc).__name__}: {exc}") from exc

    # -- helpers for app programs ------------------------------------------

    def log(self, msg: str, *args) -> None:
        text = msg % args if args else msg
        self.log_lines.append(text)
        logger.info("[%s %s] %s", self.app_name, getattr(self, "id", "?"), text)

    def warn(self, msg: str, *args) -> None:
        text = msg % args if args else msg
        self.log_lines.append("WARNING: " + text)
        logger.warning("[%s %s] %s", self.app_name, getattr(self, "id", "?"), text)

    def send(self, data: bytes):
        yield _Send(bytes(data))

    def receive(self):
        return (yield _Wait())

    def gather(self, data: bytes):
        """Participants ship ``data``; the coordinator gets every client's
        payload in ``clients`` order, its own included without transit."""
        if not self.master:
            yield _Send(bytes(data))
            return None
        got = {}
        if self.participants:
            got = yield _Wait()
        got[self.id] = bytes(data)
        return [got[c] for c in self.clients]

    def broadcast(self, data: Optional[bytes]):
        if self.master:
            if self.participants:
                yield _Send(bytes(data))
            return bytes(data)
        return (yield _Wait())

    @property
    def smpc_enabled(self) -> bool:
        return bool(self.config.get("smpc", False))

    def _smpc_rng(self) -> np.random.Generator:
        if not hasattr(self, "_mask_rng"):
            seed = self.config.get("seed")
            if seed is None:
                self._mask_rng = np.random.default_rng()
            else:
                self._mask_rng = np.random.default_rng(
                    np.random.SeedSequence([int(seed), self.clients.index(self.id), 0x5AFE])
                )
        return self._mask_rng

    def _exchange_keys(self):
        self._smpc_keys = smpc.keygen()
        mine = payload.pack(
            "smpc", {"body": np.frombuffer(self._smpc_keys.public, dtype="|u1")}, phase="pubkey", round=0
        )
        if self.master:
            parts = yield from self.gather(mine)
            published = {}
            for cid, raw in zip(self.clients, parts):
                msg = payload.unpack(raw, "smpc")
                published[cid] = msg.arrays["body"].tobytes()
            directory = smpc.exchange_keys(published, self.clients)
            arrays = {f"key:{c}": np.frombuffer(k, dtype="|u1") for c, k in directory.items()}
            raw = yield from self.broadcast(payload.pack("smpc", arrays, phase="keys", round=0))
        else:
            yield from self.gather(mine)
            raw = yield from self.broadcast(None)
        msg = payload.unpack(raw, "smpc")
        published = {name[4:]: arr.tobytes() for name, arr in msg.arrays.items() if name.startswith("key:")}
        self._key_directory = smpc.exchange_keys(published, self.clients)

    def secure_sum(self, vector: np.ndarray):
        """Sum ``vector`` over all clients through masked shares.

        Returns the decoded sum on the coordinator and ``None`` on
        participants. The first call performs the public-key exchange.
        """
        vector = np.asarray(vector, dtype=np.float64).reshape(-1)
        if not self._key_directory:
            yield from self._exchange_keys()
        self._smpc_round += 1
        rnd = self._smpc_round
        dim = vector.shape[0]
        scale = smpc.SCALE_EXPONENT
        peers = [(c, self._key_directory[c]) for c in self.clients if c != self.id]
        share, masks = smpc.mask_model(
            smpc.encode_fixed(vector, scale), self.id, peers, self._smpc_rng(), rnd, len(self.clients)
        )

        def mask_arrays(ms):
            return {f"mask:{m.origin}:{m.destination}": np.frombuffer(m.ciphertext, dtype="|u1") for m in ms}

        def read_masks(msg):
            out = []
            for name, arr in msg.arrays.items():
                if name.startswith("mask:"):
                    _, origin, dest = name.split(":", 2)
                    out.append(smpc.EncryptedMask(origin, dest, arr.tobytes()))
            return out

        up = payload.pack(
            "smpc",
            {"body": share.data.values, **mask_arrays(masks)},
            phase="share",
            round=rnd,
            dim=dim,
            scale=scale,
        )
        if self.master:
            parts = yield from self.gather(up)
            shares, relayed, for_me = [], [], []
            for cid, raw in zip(self.clients, parts):
                if cid == self.id:
                    shares.append(share)
                    pieces = masks
                else:
                    msg = payload.unpack(raw, "smpc")
                    self._check_section(msg, "share", rnd, dim)
                    shares.append(smpc.MaskedShare(cid, smpc.FixedPointVector(msg.arrays["body"], scale)))
                    pieces = read_masks(msg)
                for m in pieces:
                    (for_me if m.destination == self.id else relayed).append(m)
            yield from self.broadcast(
                payload.pack("smpc", mask_arrays(relayed), phase="masks", round=rnd, dim=dim, scale=scale)
            )
            own_sum = smpc.sum_received_masks(for_me, self._smpc_keys.private, self.id, dim, rnd, scale)
            sums = yield from self.gather(
                payload.pack("smpc", {"body": own_sum.values}, phase="masksum", round=rnd, dim=dim, scale=scale)
            )
            mask_sums = []
            for cid, raw in zip(self.clients, sums):
                msg = payload.unpack(raw, "smpc")
                self._check_section(msg, "masksum", rnd, dim)
                mask_sums.append(smpc.FixedPointVector(msg.arrays["body"], scale))
            return smpc.decode_fixed(smpc.aggregate(shares, mask_sums))
        yield from self.gather(up)
        raw = yield from self.broadcast(None)
        msg = payload.unpack(raw, "smpc")
        self._check_section(msg, "masks", rnd, dim)
        mine = [m for m in read_masks(msg) if m.destination == self.id]
        if len(mine) != len(self.clients) - 1:
            raise smpc.SmpcError(f"expected {len(self.clients) - 1} masks for {self.id}, got {len(mine)}")
        own_sum = smpc.sum_received_masks(mine, self._smpc_keys.private, self.id, dim, rnd, scale)
        yield from self.gather(
            payload.pack("smpc", {"body": own_sum.values}, phase="masksum", round=rnd, dim=dim, scale=scale)
        )
        return None

    @staticmethod
    def _check_section(msg: payload.Message, phase: str, rnd: int, dim: int) -> None:
        f = msg.fields
        if f.get("phase") != phase or f.get("round") != rnd or f.get("dim") != dim:
            raise smpc.SmpcError(
                f"unexpected SMPC section phase={f.get('phase')} round={f.get('round')} dim={f.get('dim')}"
            )
