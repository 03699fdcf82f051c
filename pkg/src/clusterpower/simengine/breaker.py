"""Inverse-time breaker model.

Each curve point says how long a breaker tolerates a given overdraw ratio.
Between points the allowed duration is interpolated log-log in the overdraw
fraction (r - 1); outside the points the nearest segment is extended.  A
thermal-style accumulator integrates dt / allowed(r) while overdrawn and
decays at 1 / (longest point duration) per second otherwise.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class TripCurve:
    points: tuple  # ((overdraw ratio > 1, max duration s), ...)
    label: str = ""

    def __post_init__(self):
        pts = tuple(sorted((float(r), float(d)) for r, d in self.points))
        if len(pts) < 2:
            raise ValueError("trip curve needs at least two points")
        if any(r <= 1.0 for r, _ in pts):
            raise ValueError("overdraw ratios must exceed 1")
        if any(d2 >= d1 for (_, d1), (_, d2) in zip(pts, pts[1:])):
            raise ValueError("higher overdraw must have strictly shorter duration")
        object.__setattr__(self, "points", pts)

    @property
    def longest(self) -> float:
        return self.points[0][1]

    def allowed_duration(self, ratio: float) -> float:
        """Seconds the breaker tolerates a sustained ``ratio``; inf at or below 1."""
        if ratio <= 1.0:
            return float("inf")
        x = np.log([r - 1.0 for r, _ in self.points])
        y = np.log([d for _, d in self.points])
        lx = np.log(ratio - 1.0)
        i = int(np.clip(np.searchsorted(x, lx) - 1, 0, len(x) - 2))
        slope = (y[i + 1] - y[i]) / (x[i + 1] - x[i])
        return float(np.exp(y[i] + slope * (lx - x[i])))


def rpp_curve() -> TripCurve:
    return TripCurve(((1.10, 1020.0), (1.40, 60.0)), "RPP")


def msb_curve() -> TripCurve:
    # Two published MSB figures (15% -> 60 s, 20% -> 45 s) are both kept.
    return TripCurve(((1.15, 60.0), (1.20, 45.0), (2.0, 30.0)), "MSB")


def sb_curve() -> TripCurve:
    # No published SB figure; sits between the RPP and MSB curves.
    return TripCurve(((1.10, 600.0), (1.40, 45.0)), "SB")


@dataclass
class BreakerState:
    accumulator: float = 0.0
    tripped: bool = False
    tripped_at: float | None = None


def breaker_update(curve: TripCurve, state: BreakerState, power: float, rating: float,
                   dt: float = 1.0, now: float = 0.0) -> bool:
    """Advance one tick; returns True while the breaker is closed (ok)."""
    if state.tripped:
        return False
    r = power / rating
    if r > 1.0:
        state.accumulator += dt / curve.allowed_duration(r)
    else:
        state.accumulator = max(state.accumulator - dt / curve.longest, 0.0)
    if state.accumulator >= 1.0 - 1e-12:
        state.tripped = True
        state.tripped_at = now
    return not state.tripped


def time_to_trip(curve: TripCurve, ratio: float, dt: float = 1.0, horizon: float = 86400.0):
    """Seconds of sustained ``ratio`` until trip (None if it never trips)."""
    st = BreakerState()
    steps = int(round(horizon / dt))
    for k in range(1, steps + 1):
        if not breaker_update(curve, st, ratio, 1.0, dt, k * dt):
            return k * dt
    return None
