"""Strictly increasing logical timestamps."""

from __future__ import annotations

import threading
import time
from typing import Callable


class MonotoneClock:
    """``next() = max(scaled wall time, last + 1)``; never repeats a value."""

    def __init__(self, scale: float = 1000.0, source: Callable[[], float] = time.time, start: int = 0):
        self._scale = scale
        self._source = source
        self._last = start
        self._lock = threading.Lock()

    def next(self) -> int:
        with self._lock:
            wall = int(self._source() * self._scale)
            self._last = max(wall, self._last + 1)
            return self._last

    def observe(self, t: int) -> None:
        """Make sure later values exceed ``t``."""
        with self._lock:
            self._last = max(self._last, t)

    @property
    def last(self) -> int:
        return self._last

    def seconds(self, ts: int) -> float:
        return ts / self._scale


class ScriptedClock(MonotoneClock):
    """Deterministic counter for reproducible runs; one unit per ``next()``."""

    def __init__(self, start: int = 0):
        super().__init__(scale=1.0, source=lambda: 0.0, start=start)
