"""Mechanical (cooling) load at the MSB, h_m(t)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class MechanicalProfile:
    """Piecewise-linear daily shape scaled by a seasonal factor.

    ``shape`` holds (hour, fraction of plan) knots over one day.  The default
    peaks slightly above plan in the afternoon, so hot-day peaks exceed the
    planned mechanical load.
    """

    plan_w: float = 3.0e5
    seasonal: float = 1.0
    shape: tuple = ((0, 0.80), (6, 0.78), (12, 0.95), (15, 1.03), (18, 0.96), (24, 0.80))
    noise: float = 0.01

    def __post_init__(self):
        hours = [h for h, _ in self.shape]
        if hours[0] != 0 or hours[-1] != 24 or any(b <= a for a, b in zip(hours, hours[1:])):
            raise ValueError("shape must span hours 0..24 in increasing order")


def mechanical_load(profile: MechanicalProfile, t: np.ndarray, seed: int = 0, start_hour: float = 12.0) -> np.ndarray:
    """Watts at each time (seconds from simulation start)."""
    t = np.asarray(t, dtype=float)
    hours = np.mod(start_hour + t / 3600.0, 24.0)
    hs, fs = zip(*profile.shape)
    base = np.interp(hours, hs, fs) * profile.plan_w * profile.seasonal
    if profile.noise and len(t):
        rng = np.random.default_rng(seed)
        # Minute-level noise, held within each minute.
        minute = (t // 60).astype(int)
        m0 = minute.min()
        per_min = 1.0 + profile.noise * rng.standard_normal(minute.max() - m0 + 1)
        base = base * per_min[minute - m0]
    return base
