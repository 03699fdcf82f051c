"""Synthetic synchronous-training power traces.

A job repeats an iteration profile of compute and exposed-communication
phases; every host of the job shares the same timeline.  Per-GPU power is
``tdp * level(t)`` where ``level`` combines the phase level, a slow load wave
(fraction of compute power) and small white jitter.  Host power adds a fixed
overhead for CPU, NICs and the rest of the tray.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..powerperf import CurveSet, f_eval

COMPUTE = "compute"
EXPOSED_COMM = "exposed_comm"


@dataclass(frozen=True)
class Phase:
    duration: float
    kind: str
    level: float  # fraction of the GPU power limit

    def __post_init__(self):
        if self.duration <= 0:
            raise ValueError("phase duration must be positive")
        if self.kind not in (COMPUTE, EXPOSED_COMM):
            raise ValueError(f"unknown phase kind {self.kind!r}")
        if not 0.0 <= self.level <= 1.0:
            raise ValueError("phase level must be in [0, 1]")


# Dense transformer step: ~8 s of compute, ~2 s of exposed collectives.
DENSE_TRANSFORMER = (Phase(8.0, COMPUTE, 0.95), Phase(2.0, EXPOSED_COMM, 0.30))


@dataclass(frozen=True)
class LoadWave:
    """Slow modulation of compute-phase power (data mix, sequence lengths).

    ``amplitude`` is the peak-to-trough depth as a fraction of compute power
    over ``period_s``; ``drift`` adds a slower component across minutes.
    """

    amplitude: float = 0.10
    period_s: float = 37.0
    drift: float = 0.04
    drift_period_s: float = 600.0

    def __post_init__(self):
        if not 0.0 <= self.amplitude + self.drift < 1.0:
            raise ValueError("load wave depth must stay below 1")


@dataclass(frozen=True)
class JobSpec:
    job_id: str
    hosts: tuple  # ((server_id, rpp_id), ...)
    gpus_per_host: int = 2
    phase_profile: tuple = DENSE_TRANSFORMER
    priority: int = 0
    host_overhead_w: float = 755.0
    wave: LoadWave = field(default_factory=LoadWave)
    jitter: float = 0.01
    step_jitter: float = 0.03  # relative sd of step duration

    def __post_init__(self):
        object.__setattr__(self, "hosts", tuple(tuple(h) for h in self.hosts))
        object.__setattr__(self, "phase_profile", tuple(self.phase_profile))
        if not self.phase_profile:
            raise ValueError(f"{self.job_id}: empty phase profile")
        comp = [p.level for p in self.phase_profile if p.kind == COMPUTE]
        comm = [p.level for p in self.phase_profile if p.kind == EXPOSED_COMM]
        if not comp:
            raise ValueError(f"{self.job_id}: profile has no compute phase")
        if comm and min(comp) <= max(comm):
            raise ValueError(f"{self.job_id}: compute level must exceed comm level")
        if self.gpus_per_host <= 0:
            raise ValueError("gpus_per_host must be positive")

    @property
    def size(self) -> int:
        return len(self.hosts)

    @property
    def server_ids(self) -> list[str]:
        return [h[0] for h in self.hosts]

    @property
    def period(self) -> float:
        return sum(p.duration for p in self.phase_profile)


@dataclass
class JobTrace:
    """Common per-GPU level timeline for one job.

    ``level`` is the per-GPU power as a fraction of the power limit,
    ``compute`` marks compute-phase ticks.
    """

    job: JobSpec
    t: np.ndarray
    level: np.ndarray
    compute: np.ndarray

    def host_power(self, tdp: float) -> np.ndarray:
        """Power of one host at a fixed power limit, per tick."""
        return self.job.gpus_per_host * tdp * self.level + self.job.host_overhead_w


def _phase_masks(job: JobSpec, t: np.ndarray, offset: float, stretch: float, rng):
    durs = np.array([p.duration * (stretch if p.kind == COMPUTE else 1.0) for p in job.phase_profile])
    edges = np.concatenate([[0.0], np.cumsum(durs)])
    period = edges[-1]
    span = (t[-1] - t[0] + offset) if len(t) else 0.0
    n_steps = int(span / (period * (1 - 4 * job.step_jitter))) + 2
    # Step k lasts period * s_k; phases keep their share of the step.
    scale = np.clip(1.0 + job.step_jitter * rng.standard_normal(n_steps), 0.5, 1.5)
    starts = np.concatenate([[0.0], np.cumsum(period * scale)])
    x = t - t[0] + offset if len(t) else t
    k = np.clip(np.searchsorted(starts, x, side="right") - 1, 0, n_steps - 1)
    pos = (x - starts[k]) / scale[k]
    idx = np.searchsorted(edges, pos, side="right") - 1
    idx = np.clip(idx, 0, len(durs) - 1)
    levels = np.array([p.level for p in job.phase_profile])
    kinds = np.array([p.kind == COMPUTE for p in job.phase_profile])
    return levels[idx], kinds[idx]


def gen_trace(job: JobSpec, tdp: float, curves: Optional[CurveSet] = None, seed: int = 0,
              duration: float = 600.0, dt: float = 1.0, t0: float = 0.0,
              phase_offset: Optional[float] = None) -> JobTrace:
    """Per-tick level timeline for ``job``; host power via ``JobTrace.host_power``.

    With ``curves`` the compute phases stretch by f(p_max)/f(tdp), so a power
    limited job takes longer per step.  Deterministic per seed.
    """
    rng = np.random.default_rng(seed)
    n = int(round(duration / dt))
    t = t0 + dt * np.arange(n)
    stretch = 1.0
    if curves is not None:
        stretch = f_eval(curves, curves.p_max) / f_eval(curves, tdp)
    offset = rng.uniform(0.0, job.period) if phase_offset is None else phase_offset
    base, compute = _phase_masks(job, t, offset, stretch, rng)

    w = job.wave
    ph1, ph2 = rng.uniform(0.0, 2 * np.pi, size=2)
    wave = 0.5 * w.amplitude * (1.0 - np.cos(2 * np.pi * t / w.period_s + ph1))
    wave += 0.5 * w.drift * (1.0 - np.cos(2 * np.pi * t / w.drift_period_s + ph2))
    level = np.where(compute, base * (1.0 - wave), base)
    if job.jitter > 0 and n:
        level = level * (1.0 + job.jitter * rng.standard_normal(n))
    level = np.clip(level, 0.0, 1.0)
    return JobTrace(job, t, level, compute)


def rack_ground_truth(job: JobSpec, tdp: float, hosts_per_rack: int = 18, seed: int = 0,
                      duration: float = 1800.0, dt: float = 0.01, curves: Optional[CurveSet] = None):
    """Fine-resolution rack power (all hosts of the rack in ``job``)."""
    from ..telemetry import GroundTruthTrace

    tr = gen_trace(job, tdp, curves, seed=seed, duration=duration, dt=dt)
    return GroundTruthTrace(tr.t, hosts_per_rack * tr.host_power(tdp))


def single_job(n_hosts: int, job_id: str = "job0", rpp: str = "rpp0", **kw) -> JobSpec:
    hosts = tuple((f"{job_id}-h{i:04d}", rpp) for i in range(n_hosts))
    return JobSpec(job_id, hosts, **kw)


def profile_from_rows(rows: Sequence) -> tuple:
    """Build a phase profile from (duration, kind, level) rows."""
    return tuple(Phase(float(d), str(k), float(l)) for d, k, l in rows)
