"""Retained-activation accounting.

The meter counts tensor *elements* held for later use by a backward pass.
Parameters and the single working state being propagated are not counted, so
the numbers depend only on the algorithm, not on the runtime.
"""
from __future__ import annotations

from contextlib import contextmanager


class MemoryMeter:
    def __init__(self):
        self.reset()

    def reset(self):
        self.current = 0
        self.peak = 0
        self.phase_peaks = {}
        self.layer_evals = 0
        self._phase = None

    @contextmanager
    def phase(self, name):
        prev, self._phase = self._phase, name
        self.phase_peaks.setdefault(name, 0)
        try:
            yield self
        finally:
            self._phase = prev

    def _bump(self, level):
        if level > self.peak:
            self.peak = level
        if self._phase is not None and level > self.phase_peaks[self._phase]:
            self.phase_peaks[self._phase] = level

    def retain(self, n):
        self.current += int(n)
        self._bump(self.current)

    def release(self, n):
        self.current -= int(n)
        if self.current < 0:
            raise RuntimeError("released more elements than were retained")

    def transient(self, n):
        """Record ``n`` elements that live only for the duration of one layer call."""
        self._bump(self.current + int(n))

    def count_eval(self, n=1):
        self.layer_evals += n

    def snapshot(self):
        return {
            "current": self.current,
            "peak": self.peak,
            "phase_peaks": dict(self.phase_peaks),
            "layer_evals": self.layer_evals,
        }


class _NullMeter(MemoryMeter):
    def retain(self, n):
        pass

    def release(self, n):
        pass

    def transient(self, n):
        pass

    def count_eval(self, n=1):
        pass


NULL_METER = _NullMeter()
