"""Ready-made simulation scenarios.

``case_study_scenario`` is a single over-limited RPP with a surging
high-priority job.  ``phase_scenarios`` builds the four power-management
phases on a desk-scale cluster: (a) 1200 W plan, (b) 960 W plan with more
racks, (c) the same racks run at the validated 1020 W, and (d) a higher base
limit with the Dimmer keeping devices safe.
"""

from __future__ import annotations

from dataclasses import replace
from typing import Optional

import numpy as np

from ..dimmer import DimmerConfig
from ..hierarchy import MSB_RATING_W, RPP_RATING_W, Level, PowerNode, RackAssignment, RackType
from ..rackmodel import catalina_gb200, provisioned_rack_power
from .engine import LimitEvent, SimScenario, Surge
from .mechanical import MechanicalProfile
from .smoother import SmootherConfig
from .traces import JobSpec

HOSTS_PER_RACK = 18
GPUS_PER_HOST = 2
SB_RATING_W = 1.25e6

# Rack counts of the desk-scale phase cluster: the 1200 W and 960 W plans
# scaled down from the full-size ledgers (74K and 86K GPUs) by the same factor.
PHASE_RACKS = {"a": 172, "b": 200, "c": 200, "d": 200}
PHASE_TDP = {"a": 1200.0, "b": 960.0, "c": 1020.0, "d": 1150.0}
MSBS = 4


def _rack_power(p: float) -> float:
    return provisioned_rack_power(catalina_gb200(p), p).provisioned


def host_ids(rack_id: str, n: int = HOSTS_PER_RACK) -> list[str]:
    return [f"{rack_id}-h{i:02d}" for i in range(n)]


def build_cluster(rack_counts: list[int], rack_power: float, racks_per_rpp: int = 3,
                  rpps_per_sb: int = 6, support_per_rpp: float = 0.0,
                  msb_rating: float = MSB_RATING_W, mech_plan: float = 3.0e5, prefix: str = ""):
    """MSB trees holding ``rack_counts[m]`` GPU racks each.

    Returns (hierarchy, racks) where ``racks`` lists (rack_id, rpp_id) in
    placement order.  ``support_per_rpp`` adds one non-GPU rack per RPP.
    """
    msbs, racks = [], []
    for m, n_racks in enumerate(rack_counts):
        n_rpp = -(-n_racks // racks_per_rpp)
        n_sb = -(-n_rpp // rpps_per_sb)
        sbs = []
        k = 0
        for s in range(n_sb):
            rpps = []
            for r in range(min(rpps_per_sb, n_rpp - s * rpps_per_sb)):
                rid = f"{prefix}m{m}s{s}r{r}"
                kids = []
                for _ in range(min(racks_per_rpp, n_racks - k)):
                    rack_id = f"{prefix}m{m}k{k:03d}"
                    kids.append(RackAssignment(rack_id, RackType.GPU_COMPUTE, rack_power,
                                               HOSTS_PER_RACK * GPUS_PER_HOST))
                    racks.append((rack_id, rid))
                    k += 1
                if support_per_rpp > 0:
                    kids.append(RackAssignment(f"{rid}-sup", RackType.SUPPORT, support_per_rpp))
                rpps.append(PowerNode(rid, Level.RPP, RPP_RATING_W, kids))
            sbs.append(PowerNode(f"{prefix}m{m}s{s}", Level.SB, SB_RATING_W, rpps))
        msbs.append(PowerNode(f"{prefix}m{m}", Level.MSB, msb_rating, sbs, mechanical_plan=mech_plan))
    return msbs, racks


def jobs_on_racks(racks: list, sizes: list[int], prefix: str = "j", **kw) -> list[JobSpec]:
    """Consecutive racks to jobs of ``sizes`` racks each (sizes must cover all racks)."""
    if sum(sizes) != len(racks):
        raise ValueError(f"job sizes cover {sum(sizes)} racks, cluster has {len(racks)}")
    jobs, k = [], 0
    for i, n in enumerate(sizes):
        hosts = [(h, rpp) for rack_id, rpp in racks[k:k + n] for h in host_ids(rack_id)]
        jobs.append(JobSpec(f"{prefix}{i:02d}", tuple(hosts), GPUS_PER_HOST, **kw))
        k += n
    return jobs


def case_study_scenario(seed: int = 0, literal: bool = False, duration: int = 900) -> SimScenario:
    """One RPP: a 2-rack low-priority job, a 1-rack high-priority job and network gear.

    At t=120 s the RPP limit is cut by 22% until t=300 s; the high-priority
    job runs flat out for one minute from t=150 s.
    """
    racks = [("k0", "rpp0"), ("k1", "rpp0"), ("k2", "rpp0")]
    kids = [RackAssignment(r, RackType.GPU_COMPUTE, _rack_power(1020.0), 36) for r, _ in racks]
    kids.append(RackAssignment("net0", RackType.NETWORK, 20_500.0))
    rpp = PowerNode("rpp0", Level.RPP, RPP_RATING_W, kids)
    sb = PowerNode("sb0", Level.SB, SB_RATING_W, [rpp])
    msb = PowerNode("msb0", Level.MSB, MSB_RATING_W, [sb])
    low = JobSpec("low", tuple((h, r) for k, r in racks[:2] for h in host_ids(k)), GPUS_PER_HOST, priority=0)
    high = JobSpec("high", tuple((h, r) for k, r in racks[2:] for h in host_ids(k)), GPUS_PER_HOST, priority=1)
    return SimScenario(
        hierarchy=[msb], jobs=[low, high], base_tdp=1020.0,
        dimmer=DimmerConfig(literal=literal), dimmer_levels=(Level.RPP,),
        mechanical=None, duration=duration, seed=seed,
        limit_events=(LimitEvent(120.0, 300.0, "rpp0", 0.78),),
        surges=(Surge(150.0, 210.0, "high", 1.0),),
        label="case_study",
    )


# Per-MSB job mix in racks out of 50; smaller jobs are capped first.
JOB_MIX = (16, 12, 8, 6, 4, 2, 1, 1)


def _job_sizes(n_racks: int, mix=JOB_MIX) -> list[int]:
    total = sum(mix)
    sizes = [round(s * n_racks / total) for s in mix]
    sizes[0] += n_racks - sum(sizes)
    return [s for s in sizes if s > 0]


def phase_scenario(phase: str, seed: int = 0, duration: int = 3600, dimmer: Optional[bool] = None,
                   base_tdp: Optional[float] = None, racks: Optional[int] = None) -> SimScenario:
    """Scenario for phase ``a``..``d``; keyword overrides for ablations."""
    if phase not in PHASE_RACKS:
        raise ValueError(f"unknown phase {phase!r}; expected one of {sorted(PHASE_RACKS)}")
    n = PHASE_RACKS[phase] if racks is None else racks
    per = [n // MSBS + (1 if m < n % MSBS else 0) for m in range(MSBS)]
    plan_tdp = 1200.0 if phase == "a" else 960.0
    hier, rk = build_cluster(per, _rack_power(plan_tdp))
    jobs = []
    k = 0
    for m, cnt in enumerate(per):
        jobs += jobs_on_racks(rk[k:k + cnt], _job_sizes(cnt), prefix=f"m{m}j")
        k += cnt
    tdp = PHASE_TDP[phase] if base_tdp is None else base_tdp
    use_dimmer = (phase == "d") if dimmer is None else dimmer
    cfg = DimmerConfig(base_tdp=tdp, safe_tdp=min(960.0, tdp), min_tdp=min(900.0, tdp)) if use_dimmer else None
    return SimScenario(
        hierarchy=hier, jobs=jobs, base_tdp=tdp, dimmer=cfg, duration=duration, seed=seed,
        mechanical=MechanicalProfile(), label=f"phase_{phase}",
    )


def phase_scenarios(seed: int = 0, duration: int = 3600) -> dict:
    return {p: phase_scenario(p, seed, duration) for p in "abcd"}


def overcommitted_scenario(seed: int = 0, duration: int = 3600, dimmer: bool = True) -> SimScenario:
    """One densely packed MSB at 1200 W: it trips without the controller."""
    sc = phase_scenario("d", seed, duration, dimmer=dimmer, base_tdp=1200.0, racks=MSBS * 56)
    return replace(sc, label="overcommitted" + ("" if dimmer else "_nodimmer"))


def smoother_scenario(enabled: bool = True, seed: int = 0, duration: int = 1800, racks: int = 18) -> SimScenario:
    """One synchronous job on one MSB, no controller: the pulsed reference workload."""
    hier, rk = build_cluster([racks], _rack_power(1020.0))
    jobs = jobs_on_racks(rk, [racks], prefix="pulse")
    return SimScenario(
        hierarchy=hier, jobs=jobs, base_tdp=1020.0, smoother=SmootherConfig(enabled=enabled),
        dimmer=None, mechanical=None, duration=duration, seed=seed,
        label="smoother_on" if enabled else "smoother_off",
    )
