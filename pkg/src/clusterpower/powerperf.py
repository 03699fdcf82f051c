"""Power-performance curves and the performance-per-watt maximizer.

All curves are piecewise-linear through their anchors and refuse to
extrapolate.  ``maximize_eta`` locates the single peak of f(p)/g(p) with a
golden-section search after checking unimodality on a 10 W grid.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .rackmodel import NetworkPowerModel, RackModel, g_of_p

GRID_W = 10.0

__all__ = [
    "CurveDomainError",
    "CurveClampWarning",
    "CurveSet",
    "EtaEvaluation",
    "EtaOptimum",
    "default_curves",
    "f_eval",
    "hbm_eval",
    "gemm_eval",
    "eta_eval",
    "maximize_eta",
    "golden_section_max",
    "eta_table",
]


class CurveDomainError(ValueError):
    """Raised when a curve is evaluated outside its anchor range."""


class CurveClampWarning(UserWarning):
    """Emitted when a GEMM lookup is clamped to the anchor hull."""


def _as_anchors(points, name):
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2 or len(arr) < 2:
        raise ValueError(f"{name}: need at least two (p, value) anchors")
    if np.any(np.diff(arr[:, 0]) <= 0):
        raise ValueError(f"{name}: anchors must be strictly increasing in p")
    return tuple(map(tuple, arr.tolist()))


@dataclass(frozen=True)
class CurveSet:
    """Anchor tables.

    ``f_anchors`` and ``hbm_anchors`` are (p, value) pairs.  ``gemm_anchors``
    maps each arithmetic intensity to its own (p, value) table; all intensity
    rows must share the same p grid.
    """

    f_anchors: tuple
    hbm_anchors: tuple
    gemm_anchors: tuple = ()
    label: str = "default"

    def __post_init__(self):
        object.__setattr__(self, "f_anchors", _as_anchors(self.f_anchors, "f"))
        object.__setattr__(self, "hbm_anchors", _as_anchors(self.hbm_anchors, "hbm"))
        f = np.asarray(self.f_anchors)
        if np.any(np.diff(f[:, 1]) < 0):
            raise ValueError("f must be non-decreasing in p")
        if self.gemm_anchors:
            rows = tuple(
                (float(ai), _as_anchors(tbl, f"gemm[{ai}]")) for ai, tbl in sorted(self.gemm_anchors)
            )
            grids = {tuple(p for p, _ in tbl) for _, tbl in rows}
            if len(grids) != 1:
                raise ValueError("gemm rows must share one p grid")
            object.__setattr__(self, "gemm_anchors", rows)

    @property
    def p_min(self) -> float:
        return self.f_anchors[0][0]

    @property
    def p_max(self) -> float:
        return self.f_anchors[-1][0]

    def with_f(self, anchors) -> "CurveSet":
        return CurveSet(anchors, self.hbm_anchors, self.gemm_anchors, self.label)


def default_curves() -> CurveSet:
    """GB200 curves: per-GPU throughput, HBM bandwidth and FP8 GEMM."""
    f = ((900.0, 0.88), (1000.0, 0.95), (1200.0, 1.0))
    hbm = ((800.0, 0.85), (900.0, 0.93), (1000.0, 1.0), (1200.0, 1.0))
    p = (800.0, 900.0, 1000.0, 1100.0, 1200.0)
    # Relative to peak FLOPS at 1200 W. Below ~1500 FLOP/B the rows are flat.
    gemm = (
        (250.0, tuple(zip(p, (0.30,) * 5))),
        (500.0, tuple(zip(p, (0.48,) * 5))),
        (1000.0, tuple(zip(p, (0.70,) * 5))),
        (1500.0, tuple(zip(p, (0.80,) * 5))),
        (3000.0, tuple(zip(p, (0.74, 0.82, 0.89, 0.94, 0.97)))),
        (6000.0, tuple(zip(p, (0.75, 0.84, 0.92, 0.97, 1.00)))),
    )
    return CurveSet(f, hbm, gemm, "gb200-fp8")


def _interp(anchors, p: float, name: str) -> float:
    arr = np.asarray(anchors)
    lo, hi = arr[0, 0], arr[-1, 0]
    if not lo <= p <= hi:
        raise CurveDomainError(f"{name}({p}) outside [{lo}, {hi}]")
    return float(np.interp(p, arr[:, 0], arr[:, 1]))


def f_eval(curves: CurveSet, p: float) -> float:
    """Per-GPU end-to-end performance at power limit ``p``, relative to p_max."""
    return _interp(curves.f_anchors, p, "f")


def hbm_eval(curves: CurveSet, p: float) -> float:
    return _interp(curves.hbm_anchors, p, "hbm")


def gemm_eval(curves: CurveSet, intensity: float, p: float) -> float:
    """Bilinear lookup of relative GEMM throughput.

    Intensities outside the anchor rows are clamped to the nearest row and a
    :class:`CurveClampWarning` is emitted; ``p`` outside the grid raises.
    """
    if intensity <= 0:
        raise CurveDomainError("arithmetic intensity must be positive")
    if not curves.gemm_anchors:
        raise CurveDomainError("curve set has no GEMM anchors")
    ais = np.array([ai for ai, _ in curves.gemm_anchors])
    vals = [_interp(tbl, p, "gemm") for _, tbl in curves.gemm_anchors]
    if intensity < ais[0] or intensity > ais[-1]:
        warnings.warn(f"intensity {intensity} clamped to [{ais[0]}, {ais[-1]}]", CurveClampWarning)
    return float(np.interp(intensity, ais, vals))


@dataclass(frozen=True)
class EtaEvaluation:
    p: float
    f: float
    g: float

    @property
    def eta(self) -> float:
        return self.f / self.g


def eta_eval(curves: CurveSet, model: RackModel, net: Optional[NetworkPowerModel], p: float) -> EtaEvaluation:
    return EtaEvaluation(p, f_eval(curves, p), g_of_p(model, net, p))


def golden_section_max(fn: Callable[[float], float], a: float, b: float, tol: float = 1.0) -> float:
    """Maximizer of a unimodal ``fn`` on [a, b], to within ``tol``."""
    invphi = (math.sqrt(5.0) - 1.0) / 2.0
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc, fd = fn(c), fn(d)
    while b - a > tol:
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = fn(c)
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = fn(d)
    return 0.5 * (a + b)


def _grid(lo: float, hi: float) -> np.ndarray:
    n = int(math.floor((hi - lo) / GRID_W + 1e-9))
    return lo + GRID_W * np.arange(n + 1)


def _is_unimodal(values: Sequence[float], rtol: float = 1e-12) -> bool:
    v = np.asarray(values)
    d = np.diff(v)
    tol = rtol * np.max(np.abs(v))
    falling = False
    for step in d:
        if step < -tol:
            falling = True
        elif step > tol and falling:
            return False
    return True


@dataclass(frozen=True)
class EtaOptimum:
    p: float
    eta: float
    unimodal: bool = True

    def __iter__(self):
        return iter((self.p, self.eta))


def maximize_eta(curves: CurveSet, model: RackModel, net: Optional[NetworkPowerModel],
                 p_min: Optional[float] = None, p_max: Optional[float] = None) -> EtaOptimum:
    """Power limit maximizing f(p)/g(p), on the 10 W grid.

    Ties go to the lower power limit.  A curve set whose grid scan is not
    unimodal is flagged and solved by exhaustive grid search instead.
    """
    lo = curves.p_min if p_min is None else p_min
    hi = curves.p_max if p_max is None else p_max
    eta = lambda p: eta_eval(curves, model, net, p).eta  # noqa: E731
    grid = _grid(lo, hi)
    scan = np.array([eta(p) for p in grid])
    if not _is_unimodal(scan):
        return EtaOptimum(float(grid[int(np.argmax(scan))]), float(scan.max()), unimodal=False)

    p_cont = golden_section_max(eta, lo, hi, tol=1.0)
    k = int(math.floor((p_cont - lo) / GRID_W))
    neighbours = [i for i in (k, k + 1) if 0 <= i < len(grid)]
    best = max(scan[i] for i in neighbours)
    ties = np.flatnonzero(scan >= best * (1 - 1e-12))
    i = int(ties[0])
    return EtaOptimum(float(grid[i]), float(scan[i]))


def eta_table(curves: CurveSet, model: RackModel, net: Optional[NetworkPowerModel]) -> list[EtaEvaluation]:
    return [eta_eval(curves, model, net, float(p)) for p in _grid(curves.p_min, curves.p_max)]
