"""Injected time source for reproducible runs."""

from __future__ import annotations

import threading


class LogicalClock:
    """Integer epoch seconds that only move when told to."""

    def __init__(self, start: int = 1_700_000_000) -> None:
        self._now = int(start)
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            return self._now

    def advance(self, seconds: int) -> int:
        if seconds < 0:
            raise ValueError("a logical clock never goes back")
        with self._lock:
            self._now += int(seconds)
            return self._now

    def set(self, when: int) -> None:
        with self._lock:
            if when < self._now:
                raise ValueError("a logical clock never goes back")
            self._now = int(when)
