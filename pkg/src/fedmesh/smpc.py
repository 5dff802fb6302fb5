"""Relayed secure aggregation by additive masking.

Every client turns its local model into fixed-point integers modulo 2**64,
subtracts one random mask per peer, and ships each mask encrypted to that
peer's public key. Peers return only the sum of the masks they received,
so the aggregator learns the sum of models and nothing else.

Ciphertexts use an ephemeral-static X25519 exchange, HKDF-SHA256 and
AES-256-GCM. The associated data binds origin, destination and round, so
a ciphertext replayed under another routing label fails authentication.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np
from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.x25519 import X25519PrivateKey, X25519PublicKey
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

SCALE_EXPONENT = 24
_RAW = serialization.Encoding.Raw
_KDF_INFO = b"fedmesh-smpc-mask-v1"


class SmpcError(Exception):
    """Protocol abort: missing pieces, wrong recipients, bad dimensions."""


class FixedPointError(SmpcError, ValueError):
    pass


class DecryptionError(SmpcError):
    pass


@dataclass
class FixedPointVector:
    values: np.ndarray  # uint64
    scale: int = SCALE_EXPONENT

    def __post_init__(self) -> None:
        self.values = np.asarray(self.values, dtype=np.uint64).reshape(-1)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FixedPointVector):
            return NotImplemented
        return self.scale == other.scale and np.array_equal(self.values, other.values)


def encode_fixed(x, scale_exponent: int = SCALE_EXPONENT) -> FixedPointVector:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64)).reshape(-1)
    if not np.all(np.isfinite(x)):
        raise FixedPointError("cannot encode non-finite values")
    bound = 2.0 ** (63 - scale_exponent)
    if np.any(np.abs(x) >= bound):
        raise FixedPointError(f"value outside the representable range |x| < 2**{63 - scale_exponent}")
    ints = np.rint(x * 2.0**scale_exponent).astype(np.int64)
    return FixedPointVector(ints.view(np.uint64), scale_exponent)


def decode_fixed(v: FixedPointVector) -> np.ndarray:
    return v.values.view(np.int64).astype(np.float64) / 2.0**v.scale


@dataclass(frozen=True)
class KeyPair:
    public: bytes
    private: bytes


@dataclass
class MaskedShare:
    owner: str
    data: FixedPointVector


@dataclass
class EncryptedMask:
    origin: str
    destination: str
    ciphertext: bytes


def keygen() -> KeyPair:
    sk = X25519PrivateKey.generate()
    return KeyPair(
        public=sk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw),
        private=sk.private_bytes(_RAW, serialization.PrivateFormat.Raw, serialization.NoEncryption()),
    )


def _derive(shared: bytes, eph_pub: bytes, recipient_pub: bytes) -> bytes:
    return HKDF(
        algorithm=hashes.SHA256(), length=32, salt=eph_pub + recipient_pub, info=_KDF_INFO
    ).derive(shared)


def encrypt(public: bytes, plaintext: bytes, aad: bytes = b"") -> bytes:
    recipient = X25519PublicKey.from_public_bytes(public)
    eph = X25519PrivateKey.generate()
    eph_pub = eph.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    key = _derive(eph.exchange(recipient), eph_pub, public)
    nonce = os.urandom(12)
    return eph_pub + nonce + AESGCM(key).encrypt(nonce, plaintext, aad)


def decrypt(private: bytes, blob: bytes, aad: bytes = b"") -> bytes:
    if len(blob) < 32 + 12 + 16:
        raise DecryptionError("ciphertext too short")
    sk = X25519PrivateKey.from_private_bytes(private)
    own_pub = sk.public_key().public_bytes(_RAW, serialization.PublicFormat.Raw)
    eph_pub, nonce, body = blob[:32], blob[32:44], blob[44:]
    key = _derive(sk.exchange(X25519PublicKey.from_public_bytes(eph_pub)), eph_pub, own_pub)
    try:
        return AESGCM(key).decrypt(nonce, body, aad)
    except InvalidTag:
        raise DecryptionError("mask failed authentication") from None


def _aad(origin: str, destination: str, round_: int) -> bytes:
    return f"{origin}>{destination}#{round_}".encode()


def exchange_keys(published: dict[str, bytes], members: Sequence[str]) -> dict[str, bytes]:
    """Check that every member published a key and return the directory."""
    missing = [m for m in members if m not in published]
    if missing:
        raise SmpcError(f"no public key from {missing}")
    return {m: published[m] for m in members}


def mask_model(
    model: FixedPointVector,
    owner: str,
    peers: Sequence[tuple[str, bytes]],
    rng,
    round_: int = 0,
    n_participants: Optional[int] = None,
) -> tuple[MaskedShare, list[EncryptedMask]]:
    """Split ``model`` into a masked share and one encrypted mask per peer.

    ``rng`` needs an ``integers(low, high, size, dtype)`` method; pass a
    seeded ``numpy.random.Generator`` for reproducible runs.
    """
    if n_participants is not None and len(peers) != n_participants - 1:
        raise SmpcError(f"expected {n_participants - 1} peers, got {len(peers)}")
    if any(cid == owner for cid, _ in peers):
        raise SmpcError("a client cannot mask for itself")
    share = model.values.copy()
    encrypted = []
    for cid, public in peers:
        mask = np.asarray(rng.integers(0, 2**64, size=model.dim, dtype=np.uint64), dtype=np.uint64)
        share -= mask
        blob = encrypt(public, mask.astype("<u8").tobytes(), _aad(owner, cid, round_))
        encrypted.append(EncryptedMask(owner, cid, blob))
    return MaskedShare(owner, FixedPointVector(share, model.scale)), encrypted


def sum_received_masks(
    masks_for_me: Iterable[EncryptedMask],
    private: bytes,
    me: str,
    dim: int,
    round_: int = 0,
    scale: int = SCALE_EXPONENT,
) -> FixedPointVector:
    total = np.zeros(dim, dtype=np.uint64)
    for em in masks_for_me:
        if em.destination != me:
            raise SmpcError(f"mask from {em.origin} is addressed to {em.destination}, not {me}")
        raw = decrypt(private, em.ciphertext, _aad(em.origin, em.destination, round_))
        mask = np.frombuffer(raw, dtype="<u8")
        if mask.shape[0] != dim:
            raise SmpcError(f"mask from {em.origin} has dimension {mask.shape[0]}, expected {dim}")
        total += mask.astype(np.uint64)
    return FixedPointVector(total, scale)


def aggregate(shares: Sequence[MaskedShare], mask_sums: Sequence[FixedPointVector]) -> FixedPointVector:
    if not shares:
        raise SmpcError("no shares")
    if len(mask_sums) != len(shares):
        raise SmpcError(f"{len(shares)} shares but {len(mask_sums)} mask sums")
    dims = {s.data.dim for s in shares} | {m.dim for m in mask_sums}
    scales = {s.data.scale for s in shares} | {m.scale for m in mask_sums}
    if len(dims) != 1 or len(scales) != 1:
        raise SmpcError(f"dimension/scale mismatch: {sorted(dims)} / {sorted(scales)}")
    total = np.zeros(dims.pop(), dtype=np.uint64)
    for s in shares:
        total += s.data.values
    for m in mask_sums:
        total += m.values
    return FixedPointVector(total, scales.pop())
