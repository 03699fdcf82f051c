"""Always-on power smoother: a per-GPU power floor during active phases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class SmootherConfig:
    enabled: bool = True
    floor_power: float = 800.0
    overhead_fraction: float = 0.02
    mode: str = "always_on"

    def __post_init__(self):
        if not 0.0 <= self.overhead_fraction <= 0.03:
            raise ValueError("smoother overhead must be within 3%")
        if self.floor_power < 0:
            raise ValueError("floor_power must be non-negative")
        if self.mode != "always_on":
            raise ValueError("only the always_on mode is modeled")


def check_floor(cfg: SmootherConfig, tdp: float) -> None:
    if cfg.enabled and cfg.floor_power >= tdp:
        raise ValueError(f"smoother floor {cfg.floor_power} W is not below the {tdp} W limit")


def apply_smoother(gpu_power, cfg: SmootherConfig, tdp: float | None = None, active=None):
    """Raise per-GPU power to the floor where the job is active.

    ``tdp`` bounds the floor: a GPU capped below the floor runs at its cap.
    Returns (smoothed power, throughput multiplier).  Peaks are unchanged.
    """
    p = np.asarray(gpu_power, dtype=float)
    if not cfg.enabled:
        return p.copy(), 1.0
    floor = cfg.floor_power
    if tdp is not None:
        check_floor(cfg, float(np.min(tdp)))
        floor = np.minimum(floor, tdp)
    lifted = np.maximum(p, floor)
    if active is not None:
        lifted = np.where(active, lifted, p)
    touched = bool(np.any(lifted > p))
    return lifted, (1.0 - cfg.overhead_fraction) if touched else 1.0


def swing_amplitude(series, window: int = 10) -> float:
    """Mean peak-to-trough swing over consecutive ``window``-tick blocks."""
    x = np.asarray(series, dtype=float)
    n = len(x) // window
    if n == 0:
        return 0.0
    blocks = x[: n * window].reshape(n, window)
    return float(np.mean(blocks.max(axis=1) - blocks.min(axis=1)))
