"""Token-bucket pacing for simulated bandwidth limits."""

from __future__ import annotations

import asyncio
import time
from typing import Callable, Optional


class TokenBucket:
    """Bucket refilled at ``rate`` bytes/s, holding at most ``capacity`` bytes.

    Consumption may drive the balance negative; the caller then waits until
    the debt is repaid. With ``capacity=0`` every B-byte transfer occupies
    the link for exactly B/rate seconds and transfers never overlap.
    """

    def __init__(self, rate: float, capacity: float = 0.0, clock: Callable[[], float] = time.monotonic):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self.capacity = float(capacity)
        self._clock = clock
        self._tokens = self.capacity
        self._stamp = clock()

    def _refill(self) -> None:
        now = self._clock()
        self._tokens = min(self.capacity, self._tokens + (now - self._stamp) * self.rate)
        self._stamp = now

    def reserve(self, nbytes: int) -> float:
        """Take ``nbytes`` and return the delay (seconds) until they are paid for."""
        self._refill()
        self._tokens -= nbytes
        return max(0.0, -self._tokens / self.rate)

    async def consume(self, nbytes: int) -> float:
        delay = self.reserve(nbytes)
        if delay > 0:
            await asyncio.sleep(delay)
        return delay


class LinkPacer:
    """One direction of a client link; ``None`` limit means unthrottled."""

    def __init__(self, limit: Optional[float] = None):
        self.bucket = TokenBucket(limit) if limit else None
        self.bytes = 0

    async def transfer(self, nbytes: int) -> None:
        self.bytes += nbytes
        if self.bucket is not None:
            await self.bucket.consume(nbytes)
