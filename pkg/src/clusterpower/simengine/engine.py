"""1 s tick operational simulator.

Per tick: job levels -> straggler coupling -> smoother -> host power ->
node power up the tree (mechanical load at MSBs) -> breakers.  Controllers
see node power through a latency channel and act every decision interval;
their commands land after ``command_delay_s``.  Hosts fall back to the safe
limit when heartbeats stop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from ..dimmer import (
    CAP,
    DimmerConfig,
    DimmerState,
    PriorityGroup,
    ServerInfo,
    dimmer_step,
    moving_average_update,
)
from ..hierarchy import Level, PowerNode, RackType, iter_nodes, validate_tree
from ..powerperf import CurveSet, default_curves
from .breaker import BreakerState, breaker_update, msb_curve, rpp_curve, sb_curve
from .latency import LatencyModel, arrival_times
from .mechanical import MechanicalProfile, mechanical_load
from .smoother import SmootherConfig, check_floor
from .traces import gen_trace

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LimitEvent:
    """Scale a controller's limit by ``factor`` during [t_start, t_end)."""

    t_start: float
    t_end: float
    device_id: str
    factor: float


@dataclass(frozen=True)
class Surge:
    """Job runs flat out at ``level`` during [t_start, t_end)."""

    t_start: float
    t_end: float
    job_id: str
    level: float = 1.0


@dataclass(frozen=True)
class Outage:
    """Controllers silent (no decisions, no heartbeats) during [t_start, t_end)."""

    t_start: float
    t_end: float


def default_breakers() -> dict:
    return {Level.RPP: rpp_curve(), Level.SB: sb_curve(), Level.MSB: msb_curve()}


@dataclass
class SimScenario:
    hierarchy: list
    jobs: list
    base_tdp: float = 1020.0
    curves: CurveSet = field(default_factory=default_curves)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    dimmer: Optional[DimmerConfig] = field(default_factory=DimmerConfig)
    dimmer_levels: tuple = (Level.RPP, Level.SB, Level.MSB)
    breakers: dict = field(default_factory=default_breakers)
    mechanical: Optional[MechanicalProfile] = field(default_factory=MechanicalProfile)
    mechanical_start_hour: float = 12.0
    latency: LatencyModel = field(default_factory=LatencyModel)
    duration: int = 3600
    seed: int = 0
    limit_events: tuple = ()
    surges: tuple = ()
    outages: tuple = ()
    non_gpu_utilization: float = 0.8
    label: str = "scenario"


@dataclass
class SimReport:
    label: str
    t: np.ndarray
    throughput: np.ndarray  # GPU-equivalents at p_max per tick
    node_ids: list
    node_levels: list
    node_power: np.ndarray  # nodes x ticks
    mechanical: np.ndarray  # MSBs x ticks, rows follow msb_ids
    msb_ids: list
    events: list
    trips: list
    stranded: np.ndarray
    job_ids: list
    job_host_power: np.ndarray  # jobs x ticks, mean power per host
    job_min_tdp: np.ndarray  # jobs x ticks
    job_gpus: np.ndarray
    summary: dict = field(default_factory=dict)

    def node(self, node_id: str) -> np.ndarray:
        return self.node_power[self.node_ids.index(node_id)]

    def job(self, job_id: str) -> int:
        return self.job_ids.index(job_id)


class _Layout:
    """Index arrays for hosts, jobs and nodes."""

    def __init__(self, sc: SimScenario):
        validate_tree(sc.hierarchy)
        self.nodes: list[PowerNode] = list(iter_nodes(sc.hierarchy))
        self.idx = {n.id: i for i, n in enumerate(self.nodes)}
        self.parent = np.full(len(self.nodes), -1)
        for n in self.nodes:
            for c in n.nodes:
                self.parent[self.idx[c.id]] = self.idx[n.id]
        self.depth = np.array([n.level.depth for n in self.nodes])
        self.fixed = np.zeros(len(self.nodes))
        for n in self.nodes:
            if n.level is Level.RPP:
                self.fixed[self.idx[n.id]] = sc.non_gpu_utilization * sum(
                    r.provisioned_power for r in n.racks if r.rack_type is not RackType.GPU_COMPUTE)

        host_ids, host_job, host_node = [], [], []
        for j, job in enumerate(sc.jobs):
            for sid, rpp in job.hosts:
                if rpp not in self.idx or self.nodes[self.idx[rpp]].level is not Level.RPP:
                    raise ValueError(f"host {sid} of {job.job_id} is on unknown RPP {rpp!r}")
                host_ids.append(sid)
                host_job.append(j)
                host_node.append(self.idx[rpp])
        if len(set(host_ids)) != len(host_ids):
            raise ValueError("a host appears in more than one job")
        self.host_ids = host_ids
        self.host_index = {h: i for i, h in enumerate(host_ids)}
        self.host_job = np.array(host_job, dtype=int)
        self.host_node = np.array(host_node, dtype=int)
        self.gpus = np.array([sc.jobs[j].gpus_per_host for j in host_job], dtype=float)
        self.overhead = np.array([sc.jobs[j].host_overhead_w for j in host_job], dtype=float)
        self.n_hosts = len(host_ids)

        # hosts under each node (subtree)
        anc = [[] for _ in range(len(self.nodes))]
        for h, n in enumerate(host_node):
            k = n
            while k >= 0:
                anc[k].append(h)
                k = self.parent[k]
        self.hosts_under = [np.array(a, dtype=int) for a in anc]
        self.job_sizes = np.bincount(self.host_job, minlength=len(sc.jobs)) if sc.jobs else np.zeros(0, int)
        self.msb = [i for i, n in enumerate(self.nodes) if n.level is Level.MSB]
        self.order = sorted(range(len(self.nodes)), key=lambda i: -self.depth[i])


def _f_vec(curves: CurveSet, p: np.ndarray) -> np.ndarray:
    xs, ys = zip(*curves.f_anchors)
    return np.interp(p, xs, ys)


def run_simulation(sc: SimScenario) -> SimReport:
    """Run ``sc`` for ``sc.duration`` ticks; deterministic per ``sc.seed``."""
    lay = _Layout(sc)
    T = int(sc.duration)
    rng = np.random.default_rng(sc.seed)
    curves = sc.curves
    if sc.smoother.enabled:
        check_floor(sc.smoother, sc.base_tdp)
    nJ, nN, nH = len(sc.jobs), len(lay.nodes), lay.n_hosts

    # job level timelines (jobs x ticks)
    seeds = rng.integers(0, 2**31, size=max(nJ, 1))
    level = np.zeros((nJ, T))
    compute = np.zeros((nJ, T), dtype=bool)
    for j, job in enumerate(sc.jobs):
        tr = gen_trace(job, sc.base_tdp, None, seed=int(seeds[j]), duration=T, dt=1.0)
        level[j], compute[j] = tr.level, tr.compute
    job_ids = [jb.job_id for jb in sc.jobs]
    for s in sc.surges:
        if s.job_id not in job_ids:
            raise ValueError(f"surge references unknown job {s.job_id!r}")
        j = job_ids.index(s.job_id)
        a, b = int(s.t_start), min(int(s.t_end), T)
        level[j, a:b] = np.maximum(level[j, a:b], s.level)
        compute[j, a:b] = True

    mech = np.zeros((len(lay.msb), T))
    if sc.mechanical is not None:
        for k, m in enumerate(lay.msb):
            mech[k] = mechanical_load(sc.mechanical, np.arange(T, dtype=float), seed=int(rng.integers(2**31)),
                                      start_hour=sc.mechanical_start_hour)
    mech_of_node = np.zeros((nN, T))
    for k, m in enumerate(lay.msb):
        mech_of_node[m] = mech[k]

    # controllers
    ctrl_nodes = [i for i, n in enumerate(lay.nodes) if sc.dimmer is not None and n.level in sc.dimmer_levels]
    cfgs = {i: replace(sc.dimmer, rated_capacity=lay.nodes[i].capacity) for i in ctrl_nodes}
    states = {i: DimmerState.for_config(cfgs[i], lay.nodes[i].id) for i in ctrl_nodes}
    delays = sc.latency.sample(rng, len(ctrl_nodes) * T).reshape(len(ctrl_nodes), T) if ctrl_nodes else None
    send = np.arange(T, dtype=float) + 1.0  # reading of tick k is complete at k+1
    arrivals = [arrival_times(send, delays[c]) for c in range(len(ctrl_nodes))] if ctrl_nodes else []
    fed = [0] * len(ctrl_nodes)
    caps = np.full((len(ctrl_nodes), nH), np.inf)
    ctrl_tdp = np.full(nH, sc.base_tdp)
    last_hb = np.zeros(nH)
    pending: list[tuple[float, int, np.ndarray, np.ndarray]] = []
    groups_cache = {i: _job_groups(lay, sc, i) for i in ctrl_nodes}
    dec = sc.dimmer.decision_interval if sc.dimmer else 7.0

    breakers = {i: BreakerState() for i in range(nN)}
    dead_host = np.zeros(nH, dtype=bool)
    trips: list[dict] = []

    node_power = np.zeros((nN, T))
    throughput = np.zeros(T)
    stranded = np.zeros(T)
    job_host_power = np.zeros((nJ, T))
    job_min_tdp = np.zeros((nJ, T))
    job_gpus = np.array([j.gpus_per_host * j.size for j in sc.jobs], dtype=float)
    hist = np.zeros((sc.dimmer.avg_window if sc.dimmer else 7, nH))
    f_base = float(_f_vec(curves, np.array([sc.base_tdp]))[0])
    sm = sc.smoother
    sm_mult = (1.0 - sm.overhead_fraction) if sm.enabled else 1.0
    ratings = np.array([n.capacity for n in lay.nodes])
    msb_mask = np.array([n.level is Level.MSB for n in lay.nodes])
    host_count = np.maximum(lay.job_sizes, 1)

    for t in range(T):
        now = float(t)
        # deliver commands due by now
        if pending:
            due = [p for p in pending if p[0] <= now + 1e-9]
            if due:
                pending = [p for p in pending if p[0] > now + 1e-9]
                for _, c, hosts, tdps in due:
                    caps[c, hosts] = tdps
                ctrl_tdp = np.minimum(sc.base_tdp, caps.min(axis=0)) if ctrl_nodes else ctrl_tdp
        if ctrl_nodes:
            stale = now - last_hb > sc.dimmer.heartbeat_timeout
            eff = np.where(stale, sc.dimmer.safe_tdp, ctrl_tdp)
        else:
            eff = np.full(nH, sc.base_tdp)

        # straggler: slowest host of each job sets its pace
        jmin = np.full(nJ, np.inf)
        np.minimum.at(jmin, lay.host_job, eff)
        alive_job = np.ones(nJ, dtype=bool)
        if dead_host.any():
            alive_job[np.unique(lay.host_job[dead_host])] = False
        lv = level[lay.host_job, t]
        cp = compute[lay.host_job, t]
        f_eff = _f_vec(curves, eff)
        f_min = _f_vec(curves, jmin)[lay.host_job]
        scale = np.where(cp, f_min / f_eff, 1.0)
        gpu = eff * lv * scale
        if sm.enabled:
            gpu = np.maximum(gpu, np.minimum(sm.floor_power, eff))
        host_p = lay.gpus * gpu + lay.overhead
        idle = ~alive_job[lay.host_job]
        host_p = np.where(idle, lay.overhead, host_p)
        host_p[dead_host] = 0.0
        hist[t % len(hist)] = host_p

        # node power, deepest level first
        p = lay.fixed.copy()
        np.add.at(p, lay.host_node, host_p)
        for i in lay.order:
            if lay.parent[i] >= 0:
                p[lay.parent[i]] += p[i]
        p += mech_of_node[:, t]
        node_power[:, t] = p

        fj = _f_vec(curves, jmin) if nJ else np.zeros(0)
        throughput[t] = float(np.sum(job_gpus * fj * alive_job)) * sm_mult
        if nJ:
            job_host_power[:, t] = np.bincount(lay.host_job, host_p, minlength=nJ) / host_count
            job_min_tdp[:, t] = jmin
        stranded[t] = float(np.sum(np.maximum(ratings[msb_mask] - p[msb_mask], 0.0)))

        for i in range(nN):
            st = breakers[i]
            if st.tripped:
                continue
            curve = sc.breakers.get(lay.nodes[i].level)
            if curve is None:
                continue
            if not breaker_update(curve, st, p[i], ratings[i], 1.0, now):
                trips.append({"t": now, "node_id": lay.nodes[i].id, "level": lay.nodes[i].level.value,
                              "power_w": float(p[i]), "rating_w": float(ratings[i])})
                dead_host[lay.hosts_under[i]] = True
                log.warning("breaker %s tripped at t=%.0f", lay.nodes[i].id, now)

        # controllers act at the end of the tick on delivered readings
        in_outage = any(o.t_start <= now < o.t_end for o in sc.outages)
        if ctrl_nodes and (t + 1) % int(dec) == 0 and not in_outage:
            t_dec = now + 1.0
            avg_power = hist.mean(axis=0) if t + 1 >= len(hist) else hist[: t + 1].mean(axis=0)
            for c, i in enumerate(ctrl_nodes):
                st, cfg = states[i], cfgs[i]
                k = int(np.searchsorted(arrivals[c], t_dec, side="right"))
                new = range(max(fed[c], k - cfg.avg_window), k)
                for kk in new:
                    moving_average_update(st, node_power[i, kk])
                fed[c] = k
                if not st.window:
                    continue
                reading = sum(st.window) / len(st.window)
                cfg_now = _limited(cfg, sc.limit_events, lay.nodes[i].id, t_dec)
                groups = _groups_now(groups_cache[i], avg_power) if reading > cfg_now.limit else ()
                res = dimmer_step(st, cfg_now, groups, t_dec, reading)
                if res.commands:
                    hosts = np.array([lay.host_index[cmd.server_id] for cmd in res.commands])
                    tdps = np.array([np.inf if cmd.kind != CAP else cmd.tdp for cmd in res.commands])
                    pending.append((t_dec + sc.latency.command_delay_s, c, hosts, tdps))
            last_hb[:] = t_dec

    events = sorted((e for st in states.values() for e in st.events), key=lambda e: (e["t"], e["device_id"]))
    report = SimReport(
        sc.label, np.arange(T, dtype=float), throughput, [n.id for n in lay.nodes],
        [n.level.value for n in lay.nodes], node_power, mech, [lay.nodes[m].id for m in lay.msb],
        events, trips, stranded, [j.job_id for j in sc.jobs], job_host_power, job_min_tdp, job_gpus,
    )
    report.summary = summarize(report)
    return report


def _limited(cfg: DimmerConfig, events: Sequence[LimitEvent], device_id: str, now: float) -> DimmerConfig:
    factor = 1.0
    for e in events:
        if e.device_id == device_id and e.t_start <= now < e.t_end:
            factor *= e.factor
    return cfg if factor == 1.0 else replace(cfg, limit_fraction=cfg.limit_fraction * factor)


def _job_groups(lay: _Layout, sc: SimScenario, node: int):
    """(priority key, job, host indices, host ids) per job under ``node``.

    Lower keys are capped first: explicit priority, then job size.
    """
    hosts = lay.hosts_under[node]
    out = []
    for j in np.unique(lay.host_job[hosts]) if len(hosts) else []:
        job = sc.jobs[int(j)]
        mine = hosts[lay.host_job[hosts] == j]
        ids = [lay.host_ids[h] for h in mine]
        out.append(((job.priority, job.size, job.job_id), job, mine, ids))
    out.sort(key=lambda x: x[0])
    return out


def _groups_now(cached, avg_power: np.ndarray) -> list[PriorityGroup]:
    groups = []
    for rank, (_, job, mine, ids) in enumerate(cached):
        servers = tuple(ServerInfo(sid, job.gpus_per_host, float(w)) for sid, w in zip(ids, avg_power[mine]))
        groups.append(PriorityGroup(rank, servers))
    return groups


def summarize(r: SimReport) -> dict:
    return {
        "label": r.label,
        "ticks": int(len(r.t)),
        "mean_throughput": float(r.throughput.mean()) if len(r.t) else 0.0,
        "cap_events": sum(1 for e in r.events if e["action"] == "cap"),
        "uncap_events": sum(1 for e in r.events if e["action"] == "uncap"),
        "trips": len(r.trips),
        "mean_stranded_w": float(r.stranded.mean()) if len(r.t) else 0.0,
    }
