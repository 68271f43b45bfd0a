"""Injectable clocks so timings can run in simulated time."""

from __future__ import annotations

import threading
import time


class SystemClock:
    def now(self) -> float:
        return time.monotonic()

    def advance(self, dt: float) -> None:
        # real time passes on its own
        pass


class SimClock:
    """Manually advanced clock; thread-safe."""

    def __init__(self, start: float = 0.0):
        self._t = float(start)
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, dt: float) -> None:
        if dt < 0:
            raise ValueError("cannot advance a clock backwards")
        with self._lock:
            self._t += dt
