"""Meter models, per-minute aggregation and the deployment-time TDP uplift.

PSU pipeline: 100 ms mean power -> 1 s running mean -> sample every 3 s ->
multiplicative bias and jitter.  DCIM: 1 s mean power with a random
accuracy error, reported as the per-minute maximum.  Timestamps mark the end
of the window they summarize; a sample at exactly t0 + 60 s belongs to
minute 0.

Percentiles use the nearest-rank convention throughout.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence, Union

import numpy as np

from .powerperf import GRID_W, CurveSet
from .rackmodel import RackModel

__all__ = [
    "STATS",
    "GroundTruthTrace",
    "PsuMeterModel",
    "DcimMeterModel",
    "PsuSamples",
    "MinuteAggregate",
    "AggregateSeries",
    "AggregatorChoice",
    "UpliftResult",
    "nearest_rank",
    "psu_stream",
    "dcim_minute_max",
    "aggregate_minute",
    "select_aggregator",
    "AggregatorStudy",
    "aggregator_study",
    "validate_tdp_uplift",
    "calibrated_rack_generator",
    "write_trace_csv",
    "read_trace_csv",
    "write_aggregates_csv",
]

STATS = ("max", "p90", "p80", "p70", "p60", "p50", "mean")
_PCT = {"p90": 90, "p80": 80, "p70": 70, "p60": 60, "p50": 50}
MINUTE = 60.0


@dataclass(frozen=True)
class GroundTruthTrace:
    t: np.ndarray
    watts: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        w = np.asarray(self.watts, dtype=float)
        if t.ndim != 1 or t.shape != w.shape:
            raise ValueError("t and watts must be 1-D arrays of equal length")
        if len(t) > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        if np.any(w < 0):
            raise ValueError("power must be non-negative")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "watts", w)

    @property
    def dt(self) -> float:
        return float(np.median(np.diff(self.t))) if len(self.t) > 1 else 0.0

    @property
    def duration(self) -> float:
        return len(self.t) * self.dt

    @property
    def start(self) -> float:
        """Start of the first sample window (sample i covers [t_i, t_i + dt))."""
        return float(self.t[0]) if len(self.t) else 0.0

    def __add__(self, other: "GroundTruthTrace") -> "GroundTruthTrace":
        if not np.array_equal(self.t, other.t):
            raise ValueError("traces must share timestamps")
        return GroundTruthTrace(self.t, self.watts + other.watts)

    def scaled(self, factor: float) -> "GroundTruthTrace":
        return GroundTruthTrace(self.t, self.watts * factor)


@dataclass(frozen=True)
class PsuMeterModel:
    metering_interval: float = 0.1
    dsp_window: float = 1.0
    log_interval: float = 3.0
    bias: float = 1.04
    noise: float = 0.004  # relative sd of per-sample Gaussian jitter

    def __post_init__(self):
        if self.bias < 1.0:
            raise ValueError("PSU bias must be >= 1")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0 < self.metering_interval <= self.dsp_window <= self.log_interval:
            raise ValueError("need metering_interval <= dsp_window <= log_interval")


@dataclass(frozen=True)
class DcimMeterModel:
    sample_interval: float = 1.0
    accuracy: float = 0.01

    def __post_init__(self):
        if not 0.0 <= self.accuracy <= 0.05:
            raise ValueError("accuracy must be in [0, 0.05]")
        if self.sample_interval <= 0:
            raise ValueError("sample_interval must be positive")


@dataclass(frozen=True)
class PsuSamples:
    t: np.ndarray
    watts: np.ndarray
    short: bool = False  # trace too short to fill one log interval


def _block_mean(trace: GroundTruthTrace, width: float) -> tuple[np.ndarray, np.ndarray]:
    """Means over consecutive windows of ``width`` seconds, stamped at window end."""
    dt = trace.dt
    if dt <= 0:
        return np.empty(0), np.empty(0)
    k = max(int(round(width / dt)), 1)
    n = len(trace.watts) // k
    means = trace.watts[: n * k].reshape(n, k).mean(axis=1)
    ends = trace.t[0] + k * dt * np.arange(1, n + 1)
    return ends, means


def psu_stream(trace: GroundTruthTrace, meter: PsuMeterModel = PsuMeterModel(), seed: int = 0) -> PsuSamples:
    """PSU log samples for one rack.  Identical seeds give identical series."""
    ends, bins = _block_mean(trace, meter.metering_interval)
    w = int(round(meter.dsp_window / meter.metering_interval))
    step = int(round(meter.log_interval / meter.metering_interval))
    if len(bins) < max(w, step):
        return PsuSamples(np.empty(0), np.empty(0), short=True)
    csum = np.concatenate([[0.0], np.cumsum(bins)])
    idx = np.arange(step - 1, len(bins), step)
    idx = idx[idx >= w - 1]
    running = (csum[idx + 1] - csum[idx + 1 - w]) / w
    rng = np.random.default_rng(seed)
    jitter = 1.0 + meter.noise * rng.standard_normal(len(idx)) if meter.noise else 1.0
    return PsuSamples(ends[idx], running * meter.bias * jitter)


def _minute_of(t: np.ndarray, t0: float) -> np.ndarray:
    return np.floor((t - t0 - 1e-9) / MINUTE).astype(int)


def dcim_minute_max(trace: Union[GroundTruthTrace, Sequence[GroundTruthTrace]],
                    meter: DcimMeterModel = DcimMeterModel(), seed: int = 0) -> dict:
    """Per-minute maximum of 1 s DCIM readings over the summed traces: {minute: watts}."""
    if not isinstance(trace, GroundTruthTrace):
        traces = list(trace)
        total = traces[0]
        for tr in traces[1:]:
            total = total + tr
        trace = total
    ends, vals = _block_mean(trace, meter.sample_interval)
    if not len(vals):
        return {}
    rng = np.random.default_rng(seed)
    vals = vals * (1.0 + rng.uniform(-meter.accuracy, meter.accuracy, len(vals)))
    minutes = _minute_of(ends, trace.start)
    out: dict[int, float] = {}
    for m, v in zip(minutes.tolist(), vals.tolist()):
        out[m] = max(out.get(m, -math.inf), v)
    return out


def nearest_rank(values, q: int) -> float:
    """Nearest-rank percentile: the ceil(q/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    n = len(v)
    if n == 0:
        raise ValueError("empty sample")
    r = min(max(-(-q * n // 100), 1), n)
    return float(v[r - 1])


@dataclass(frozen=True)
class MinuteAggregate:
    minute_index: int
    stats: dict

    def __post_init__(self):
        s = self.stats
        order = [s["p50"], s["p60"], s["p70"], s["p80"], s["p90"], s["max"]]
        if any(b < a for a, b in zip(order, order[1:])):
            raise ValueError(f"minute {self.minute_index}: percentiles out of order")


@dataclass(frozen=True)
class AggregateSeries:
    minutes: tuple
    excluded: tuple = ()

    def __iter__(self):
        return iter(self.minutes)

    def __len__(self):
        return len(self.minutes)

    def by_minute(self) -> dict:
        return {m.minute_index: m for m in self.minutes}


def minute_stats(values) -> dict:
    v = np.asarray(values, dtype=float)
    stats = {"max": float(v.max()), "mean": float(v.mean())}
    for k, q in _PCT.items():
        stats[k] = nearest_rank(v, q)
    return {k: stats[k] for k in STATS}


def aggregate_minute(samples: Sequence[PsuSamples], t0: float = 0.0) -> AggregateSeries:
    """Sum racks at each tick, then per-minute order statistics.

    All racks must share one tick grid; NaN marks a missing sample.  A minute
    with any missing rack sample is dropped and listed in ``excluded``.
    """
    samples = list(samples)
    if not samples:
        raise ValueError("no rack samples")
    ticks = samples[0].t
    for s in samples[1:]:
        if not np.array_equal(s.t, ticks):
            raise ValueError("rack sample grids differ")
    stack = np.vstack([s.watts for s in samples])
    total = stack.sum(axis=0)
    missing = np.isnan(stack).any(axis=0)
    minutes = _minute_of(ticks, t0)
    out, excluded = [], []
    for m in np.unique(minutes):
        sel = minutes == m
        if missing[sel].any():
            excluded.append(int(m))
            continue
        out.append(MinuteAggregate(int(m), minute_stats(total[sel])))
    return AggregateSeries(tuple(out), tuple(excluded))


@dataclass(frozen=True)
class AggregatorChoice:
    best: str
    errors: dict  # stat -> mean(stat / dcim_max) over qualifying minutes
    n_minutes: int

    @property
    def distance(self) -> dict:
        return {k: abs(v - 1.0) for k, v in self.errors.items()}


def select_aggregator(psu: Union[AggregateSeries, Sequence[MinuteAggregate]], dcim: Mapping[int, float],
                      load_percentile: int = 90) -> AggregatorChoice:
    """Aggregation statistic whose mean ratio to DCIM max is nearest 1.

    Only minutes where the DCIM reading is at or above its own
    ``load_percentile`` take part, so lightly loaded minutes do not dilute the
    comparison.  Ties go to the earlier entry of ``STATS``.
    """
    aggs = {m.minute_index: m for m in psu}
    common = sorted(set(aggs) & set(dcim))
    if not common:
        raise ValueError("no aligned minutes between PSU and DCIM")
    cut = nearest_rank([dcim[m] for m in common], load_percentile)
    keep = [m for m in common if dcim[m] >= cut and dcim[m] > 0]
    if not keep:
        raise ValueError("no minutes pass the load filter")
    errors = {
        k: float(np.mean([aggs[m].stats[k] / dcim[m] for m in keep])) for k in STATS
    }
    best = min(STATS, key=lambda k: (abs(errors[k] - 1.0), STATS.index(k)))
    return AggregatorChoice(best, errors, len(keep))


# --- deployment-time TDP uplift ---------------------------------------------

TraceGenerator = Callable[[float, int], GroundTruthTrace]


@dataclass(frozen=True)
class UpliftResult:
    p: Optional[float]
    rack_budget: float
    stat_by_p: dict = field(default_factory=dict)  # p -> worst per-minute stat

    @property
    def feasible(self) -> bool:
        return self.p is not None


def rack_minute_stat(trace: GroundTruthTrace, meter: PsuMeterModel, seed: int, stat: str = "p70") -> float:
    series = aggregate_minute([psu_stream(trace, meter, seed)], t0=trace.start)
    if not len(series):
        raise ValueError("trace shorter than one PSU log interval")
    return max(m.stats[stat] for m in series)


def validate_tdp_uplift(model: RackModel, curves: CurveSet, trace_gen: TraceGenerator, rack_budget: float,
                        meter: Optional[PsuMeterModel] = None, seed: int = 0, stat: str = "p70",
                        p_min: Optional[float] = None, p_max: Optional[float] = None,
                        rtol: float = 1e-9) -> UpliftResult:
    """Largest 10 W-grid limit whose worst per-minute PSU ``stat`` fits ``rack_budget``.

    Every candidate limit is simulated with the same seed, so differences
    between limits come from the limit alone.  The sweep stops at the GPU TDP
    of ``model``.
    """
    meter = meter or PsuMeterModel()
    lo = curves.p_min if p_min is None else p_min
    hi = min(curves.p_max, model.gpu_tdp) if p_max is None else p_max
    grid = lo + GRID_W * np.arange(int(math.floor((hi - lo) / GRID_W + 1e-9)) + 1)
    stats, best = {}, None
    for p in grid.tolist():
        v = rack_minute_stat(trace_gen(p, seed), meter, seed, stat)
        stats[p] = v
        if v <= rack_budget * (1.0 + rtol):
            best = p
    return UpliftResult(best, rack_budget, stats)


def calibrated_rack_generator(hosts_per_rack: int = 18, duration: float = 3600.0, dt: float = 0.01,
                              job=None) -> TraceGenerator:
    """Dense-transformer rack traces at 10 ms resolution (seeded)."""
    from .simengine.traces import rack_ground_truth, single_job

    job = job or single_job(hosts_per_rack, "validate")

    def gen(p: float, seed: int) -> GroundTruthTrace:
        return rack_ground_truth(job, p, hosts_per_rack, seed=seed, duration=duration, dt=dt)

    return gen


@dataclass(frozen=True)
class AggregatorStudy:
    """Aggregator selection repeated over seeds."""

    choices: tuple  # AggregatorChoice per seed
    seeds: tuple

    @property
    def mean_errors(self) -> dict:
        return {k: float(np.mean([c.errors[k] for c in self.choices])) for k in STATS}

    @property
    def mean_distance(self) -> dict:
        return {k: float(np.mean([c.distance[k] for c in self.choices])) for k in STATS}

    @property
    def best(self) -> str:
        d = self.mean_distance
        return min(STATS, key=lambda k: (d[k], STATS.index(k)))


def aggregator_study(trace_gen: TraceGenerator, p: float, seeds: Sequence[int],
                     psu_meter: Optional[PsuMeterModel] = None, dcim_meter: Optional[DcimMeterModel] = None,
                     load_percentile: int = 90) -> AggregatorStudy:
    """PSU vs DCIM comparison on one rack trace per seed at limit ``p``."""
    psu_meter = psu_meter or PsuMeterModel()
    dcim_meter = dcim_meter or DcimMeterModel()
    choices = []
    for s in seeds:
        tr = trace_gen(p, s)
        agg = aggregate_minute([psu_stream(tr, psu_meter, seed=s)], t0=tr.start)
        dcim = dcim_minute_max(tr, dcim_meter, seed=s + 7919)
        choices.append(select_aggregator(agg, dcim, load_percentile))
    return AggregatorStudy(tuple(choices), tuple(seeds))


# --- CSV --------------------------------------------------------------------


def write_trace_csv(path, trace: GroundTruthTrace) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_seconds", "watts"])
        for t, v in zip(trace.t.tolist(), trace.watts.tolist()):
            w.writerow([repr(t), repr(v)])


def read_trace_csv(path) -> GroundTruthTrace:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return GroundTruthTrace(np.array([float(r["t_seconds"]) for r in rows]),
                            np.array([float(r["watts"]) for r in rows]))


def write_aggregates_csv(path, series: AggregateSeries) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["minute", "stat", "watts"])
        for m in series:
            for k in STATS:
                w.writerow([m.minute_index, k, repr(m.stats[k])])
