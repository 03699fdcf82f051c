"""Straggler coupling for synchronous jobs.

The slowest host sets the step time, so a job runs at f(min tdp)/f(base).
Hosts that are not capped finish their compute early and wait, which scales
their compute-phase power by the same factor.
"""

from __future__ import annotations

from typing import Mapping

import numpy as np

from ..powerperf import CurveSet, f_eval


def straggler_factor(tdps, base_tdp: float, curves: CurveSet) -> float:
    lo = float(np.min(np.asarray(list(tdps), dtype=float)))
    return min(f_eval(curves, lo) / f_eval(curves, base_tdp), 1.0)


def host_scale(tdps: np.ndarray, factor: float) -> np.ndarray:
    """Compute-phase power multiplier per host: capped hosts 1, others ``factor``."""
    tdps = np.asarray(tdps, dtype=float)
    return np.where(np.isclose(tdps, tdps.min()), 1.0, factor)


def apply_straggler(job, effective_tdps: Mapping[str, float], curves: CurveSet, base_tdp: float,
                    level: np.ndarray | None = None, compute: np.ndarray | None = None):
    """Job throughput factor and, when a level trace is given, per-host power.

    Returns (factor, host power array [hosts x ticks] or None).
    """
    ids = job.server_ids
    missing = [h for h in ids if h not in effective_tdps]
    if missing:
        raise KeyError(f"no tdp for hosts {missing[:3]}")
    tdps = np.array([effective_tdps[h] for h in ids], dtype=float)
    factor = straggler_factor(tdps, base_tdp, curves)
    if level is None:
        return factor, None
    scale = host_scale(tdps, factor)[:, None]
    comp = np.ones_like(level, dtype=bool) if compute is None else compute
    gpu = tdps[:, None] * level[None, :] * np.where(comp[None, :], scale, 1.0)
    return factor, job.gpus_per_host * gpu + job.host_overhead_w


def even_vs_concentrated(curves: CurveSet, base_tdp: float, n_hosts: int, total_reclaim_w: float,
                         q_hosts: int, gpus_per_host: int = 2, p_min: float | None = None):
    """Throughput factors for reclaiming the same power evenly or on ``q_hosts``.

    ``total_reclaim_w`` is the reclaimed GPU power summed over the job.
    Concentrated reclaim that would push a host below ``p_min`` is infeasible
    and reported as None.
    """
    p_min = curves.p_min if p_min is None else p_min
    total = total_reclaim_w
    even = base_tdp - total / (n_hosts * gpus_per_host)
    conc = base_tdp - total / (q_hosts * gpus_per_host)
    f_even = f_eval(curves, even) / f_eval(curves, base_tdp) if even >= p_min else None
    f_conc = f_eval(curves, conc) / f_eval(curves, base_tdp) if conc >= p_min else None
    return f_even, f_conc
