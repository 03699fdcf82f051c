"""Telemetry and command latency."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class LatencyModel:
    """Log-normal reading delay, clipped at ``max_s``.

    Default median 0.6 s with sigma chosen so the clip point sits near the
    far tail (about 1 in 5000 readings).
    """

    median_s: float = 0.6
    sigma: float = 0.5
    max_s: float = 4.5
    command_delay_s: float = 1.0

    def __post_init__(self):
        if self.median_s <= 0 or self.sigma < 0 or self.max_s < self.median_s:
            raise ValueError("invalid latency parameters")
        if not 0.0 <= self.command_delay_s <= 1.0:
            raise ValueError("commands must be delivered within 1 s")

    def sample(self, rng: np.random.Generator, n: int) -> np.ndarray:
        d = self.median_s * np.exp(self.sigma * rng.standard_normal(n))
        return np.minimum(d, self.max_s)


def arrival_times(send_times: np.ndarray, delays: np.ndarray) -> np.ndarray:
    """Arrival time per reading; a meter's readings never overtake each other."""
    return np.maximum.accumulate(np.asarray(send_times) + np.asarray(delays))


class DelayedChannel:
    """FIFO queue of (arrival time, payload) for one meter."""

    def __init__(self) -> None:
        self._queue: list[tuple[float, object]] = []
        self._last = -np.inf

    def send(self, now: float, delay: float, payload) -> None:
        arrive = max(now + delay, self._last)
        self._last = arrive
        self._queue.append((arrive, payload))

    def receive(self, now: float) -> list:
        ready = 0
        while ready < len(self._queue) and self._queue[ready][0] <= now + 1e-9:
            ready += 1
        out = [p for _, p in self._queue[:ready]]
        del self._queue[:ready]
        return out
