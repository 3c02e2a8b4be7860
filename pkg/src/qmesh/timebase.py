"""Integer-nanosecond time sources and the event loop everything runs on.

Two clock behaviors share one engine: virtual time jumps straight to the
next due event (deterministic, used by tests and all acceptance runs),
real time sleeps until each event's due point on the wall clock. Event
order is (due_ns, sequence-number), so runs with the same seed schedule
identically in either mode.
"""

from __future__ import annotations

import heapq
import time as _time
from typing import Callable, Optional

NS_PER_SEC = 1_000_000_000
NS_PER_MS = 1_000_000
NS_PER_US = 1_000


def seconds_to_ns(seconds: float) -> int:
    return int(round(seconds * NS_PER_SEC))


def ns_to_seconds(ns: int) -> float:
    return ns / NS_PER_SEC


class Event:
    """A scheduled callback. Cancellation is lazy: the heap entry stays."""

    __slots__ = ("due_ns", "seq", "fn", "cancelled")

    def __init__(self, due_ns: int, seq: int, fn: Callable[[], None]):
        self.due_ns = due_ns
        self.seq = seq
        self.fn = fn
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True

    def __lt__(self, other: "Event") -> bool:
        return (self.due_ns, self.seq) < (other.due_ns, other.seq)


class EventLoop:
    """Single-threaded discrete-event loop over integer nanoseconds."""

    def __init__(self, real_time: bool = False):
        self._heap: list[Event] = []
        self._seq = 0
        self.now_ns = 0
        self.real_time = real_time
        self._wall_start: Optional[float] = None

    def schedule_at(self, due_ns: int, fn: Callable[[], None]) -> Event:
        if due_ns < self.now_ns:
            due_ns = self.now_ns
        self._seq += 1
        ev = Event(due_ns, self._seq, fn)
        heapq.heappush(self._heap, ev)
        return ev

    def schedule(self, delay_ns: int, fn: Callable[[], None]) -> Event:
        return self.schedule_at(self.now_ns + max(0, delay_ns), fn)

    def _pace(self, due_ns: int) -> None:
        if self._wall_start is None:
            self._wall_start = _time.monotonic()
        target = self._wall_start + due_ns / NS_PER_SEC
        lag = target - _time.monotonic()
        if lag > 0:
            _time.sleep(lag)

    def run(self, until_ns: Optional[int] = None) -> None:
        """Process events in order; stop when drained or past until_ns."""
        while self._heap:
            ev = self._heap[0]
            if ev.cancelled:
                heapq.heappop(self._heap)
                continue
            if until_ns is not None and ev.due_ns > until_ns:
                self.now_ns = until_ns
                return
            heapq.heappop(self._heap)
            if self.real_time:
                self._pace(ev.due_ns)
            self.now_ns = ev.due_ns
            ev.fn()
        if until_ns is not None and until_ns > self.now_ns:
            self.now_ns = until_ns

    def pending(self) -> int:
        return sum(1 for ev in self._heap if not ev.cancelled)
