"""Clocks shared by the harness, the proxy and the flow manager.

``VirtualClock`` only moves when someone advances it: link traffic, sleeps
and explicit ``advance_to`` calls. Callbacks scheduled on it run
synchronously, in time order, in whichever thread crossed their timestamp.
"""

from __future__ import annotations

import heapq
import itertools
import threading
import time
from typing import Callable


class RealClock:
    virtual = False

    def __init__(self):
        self._origin = time.monotonic()
        self._lock = threading.Lock()
        self._timers: list[threading.Timer] = []

    def now(self) -> float:
        return time.monotonic() - self._origin

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def advance(self, seconds: float) -> None:
        # wall time moves on its own
        pass

    def next_event_time(self) -> float | None:
        return None

    def schedule(self, t: float, callback: Callable[[], None]) -> None:
        delay = max(0.0, t - self.now())
        timer = threading.Timer(delay, callback)
        timer.daemon = True
        with self._lock:
            self._timers.append(timer)
        timer.start()

    def cancel_all(self) -> None:
        with self._lock:
            timers, self._timers = self._timers, []
        for timer in timers:
            timer.cancel()


NS = 1_000_000_000


def to_ns(seconds: float) -> int:
    return round(seconds * NS)


class VirtualClock:
    """Discrete-event clock. Time is kept in integer nanoseconds so that
    the same sequence of advances always lands on the same instant."""

    virtual = True

    def __init__(self, start: float = 0.0):
        self._ns = to_ns(start)
        self._lock = threading.RLock()
        self._events: list[tuple[int, int, Callable[[], None]]] = []
        self._seq = itertools.count()

    def now(self) -> float:
        with self._lock:
            return self._ns / NS

    def now_ns(self) -> int:
        with self._lock:
            return self._ns

    def schedule(self, t: float, callback: Callable[[], None]) -> None:
        with self._lock:
            heapq.heappush(self._events, (to_ns(t), next(self._seq), callback))
            if self._events[0][0] <= self._ns:
                self._fire_due()

    def every(self, period: float, callback: Callable[[float], None], start: float | None = None, until: float | None = None) -> None:
        """Run ``callback(now)`` every ``period`` seconds of virtual time."""
        step = to_ns(period)
        if step <= 0:
            raise ValueError("period must be positive")
        first = self.now_ns() + step if start is None else to_ns(start)
        last = None if until is None else to_ns(until)

        def fire(t=first):
            callback(t / NS)
            nxt = t + step
            if last is None or nxt <= last:
                self._schedule_ns(nxt, lambda: fire(nxt))

        self._schedule_ns(first, fire)

    def _schedule_ns(self, t_ns: int, callback) -> None:
        with self._lock:
            heapq.heappush(self._events, (t_ns, next(self._seq), callback))
            if self._events[0][0] <= self._ns:
                self._fire_due()

    def next_event_time(self) -> float | None:
        with self._lock:
            return self._events[0][0] / NS if self._events else None

    def next_event_ns(self) -> int | None:
        with self._lock:
            return self._events[0][0] if self._events else None

    def advance(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot move a clock backwards")
        self.advance_ns(to_ns(seconds))

    def advance_ns(self, n: int) -> None:
        with self._lock:
            self._advance_to_ns(self._ns + n)

    def advance_to(self, t: float) -> None:
        self._advance_to_ns(to_ns(t))

    def _advance_to_ns(self, target: int) -> None:
        with self._lock:
            while self._events and self._events[0][0] <= target:
                when, _, callback = heapq.heappop(self._events)
                self._ns = max(self._ns, when)
                callback()
            self._ns = max(self._ns, target)

    def _fire_due(self) -> None:
        while self._events and self._events[0][0] <= self._ns:
            _, _, callback = heapq.heappop(self._events)
            callback()

    def sleep(self, seconds: float) -> None:
        self.advance(max(0.0, seconds))

    def pending_events(self) -> int:
        with self._lock:
            return len(self._events)

    def cancel_all(self) -> None:
        with self._lock:
            self._events.clear()
