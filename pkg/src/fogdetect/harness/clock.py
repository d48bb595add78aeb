"""Virtual time and simulated links."""

from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from fractions import Fraction
from typing import Any, Callable


class Timer:
    __slots__ = ("cancelled",)

    def __init__(self):
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class VirtualClock:
    """Integer-microsecond event queue.

    Events run in ``(time, insertion order)`` order, so equal-time events keep
    the order they were scheduled in. Time never goes backwards.
    """

    def __init__(self, start_us: int = 0):
        self.now = start_us
        self._queue: list[tuple[int, int, Timer, Callable[..., Any], tuple]] = []
        self._seq = itertools.count()
        self.events_run = 0

    def call_at(self, at_us: int, fn: Callable[..., Any], *args: Any) -> Timer:
        if at_us < self.now:
            raise ValueError(f"cannot schedule at {at_us} before now={self.now}")
        timer = Timer()
        heapq.heappush(self._queue, (at_us, next(self._seq), timer, fn, args))
        return timer

    def call_later(self, delay_us: int, fn: Callable[..., Any], *args: Any) -> Timer:
        return self.call_at(self.now + delay_us, fn, *args)

    def pending(self) -> int:
        return sum(1 for entry in self._queue if not entry[2].cancelled)

    def peek(self) -> int | None:
        while self._queue and self._queue[0][2].cancelled:
            heapq.heappop(self._queue)
        return self._queue[0][0] if self._queue else None

    def step(self) -> bool:
        """Run the next live event; False when the queue is empty."""
        while self._queue:
            at, _, timer, fn, args = heapq.heappop(self._queue)
            if timer.cancelled:
                continue
            self.now = at
            self.events_run += 1
            fn(*args)
            return True
        return False

    def run(self, until_us: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        while True:
            if stop is not None and stop():
                return
            nxt = self.peek()
            if nxt is None or (until_us is not None and nxt > until_us):
                if until_us is not None and until_us > self.now:
                    self.now = until_us
                return
            self.step()


@dataclass(frozen=True)
class LinkModel:
    """One-way transfer time = latency + size / bandwidth, the same in both directions."""

    latency_ms: float
    bandwidth_bytes_per_s: float

    def __post_init__(self):
        if self.latency_ms < 0:
            raise ValueError("link latency must be >= 0")
        if self.bandwidth_bytes_per_s <= 0:
            raise ValueError("link bandwidth must be > 0")

    def transfer_us(self, nbytes: int) -> int:
        """Whole microseconds, rounded up, computed exactly from the declared parameters."""
        exact = Fraction(self.latency_ms) * 1000 + Fraction(nbytes * 1_000_000) / Fraction(self.bandwidth_bytes_per_s)
        return math.ceil(exact)

    def describe(self) -> str:
        return f"{self.latency_ms:g}ms/{self.bandwidth_bytes_per_s * 8 / 1e6:g}Mbit"


LAN = LinkModel(2.0, 12_500_000)
WAN_NEAR = LinkModel(50.0, 2_500_000)
WAN_FAR = LinkModel(150.0, 2_500_000)
LOOPBACK = LinkModel(0.0, 10_000_000_000)
