"""Per-device runtime capping controller.

Every decision interval the controller compares the 7 s moving average of
device power with its limit (a fraction of the rating).  When over, it walks
the priority groups from the lowest priority up and gives every server in a
group the same reduced GPU power limit, until its own power estimate says
enough was reclaimed.  Caps expire together once the device has been under
the limit for ``cap_expiration`` seconds past the most recent cap.  Hosts
that stop hearing from the controller fall back to ``safe_tdp``.
"""

from __future__ import annotations

import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

log = logging.getLogger(__name__)

__all__ = [
    "DimmerConfig",
    "ServerInfo",
    "PriorityGroup",
    "CapCommand",
    "DimmerState",
    "HostControl",
    "StepResult",
    "dimmed_tdp",
    "estimate_capped_power",
    "moving_average_update",
    "dimmer_step",
    "heartbeat_failover",
    "groups_from_jobs",
    "write_event_log",
]

CAP = "cap"
UNCAP = "uncap"


@dataclass(frozen=True)
class DimmerConfig:
    rated_capacity: float = 197_500.0
    limit_fraction: float = 0.97
    decision_interval: float = 7.0
    avg_window: int = 7
    cap_expiration: float = 420.0
    min_tdp: float = 900.0
    server_min_pwr_capped: float = 2350.0  # mean smoothed host power at min_tdp, default workload
    base_tdp: float = 1020.0
    safe_tdp: float = 960.0
    heartbeat_timeout: float = 30.0
    literal: bool = False  # reproduce the pseudocode's tdp lines verbatim

    def __post_init__(self):
        if not self.min_tdp <= self.safe_tdp <= self.base_tdp:
            raise ValueError("need min_tdp <= safe_tdp <= base_tdp")
        if self.decision_interval <= 0:
            raise ValueError("decision_interval must be positive")
        if self.cap_expiration <= self.decision_interval:
            raise ValueError("cap_expiration must exceed decision_interval")
        if self.avg_window < 1:
            raise ValueError("avg_window must be >= 1")
        if not 0 < self.limit_fraction <= 1:
            raise ValueError("limit_fraction must be in (0, 1]")

    @property
    def limit(self) -> float:
        return self.limit_fraction * self.rated_capacity


@dataclass(frozen=True)
class ServerInfo:
    server_id: str
    accelerator_count: int
    avg_power: float
    accelerator_type: str = "GB200"


@dataclass(frozen=True)
class PriorityGroup:
    priority: int
    servers: tuple

    def __post_init__(self):
        object.__setattr__(self, "servers", tuple(self.servers))
        if not self.servers:
            raise ValueError(f"priority group {self.priority} is empty")

    @property
    def power(self) -> float:
        return sum(s.avg_power for s in self.servers)


@dataclass(frozen=True)
class CapCommand:
    server_id: str
    tdp: float
    issued_at: float
    kind: str = CAP


@dataclass
class DimmerState:
    device_id: str = "device"
    window: deque = field(default_factory=lambda: deque(maxlen=7))
    active_caps: dict = field(default_factory=dict)  # server -> (tdp, cap_time)
    last_heartbeat_sent: dict = field(default_factory=dict)
    last_cap_time: Optional[float] = None
    events: list = field(default_factory=list)

    @classmethod
    def for_config(cls, cfg: DimmerConfig, device_id: str = "device") -> "DimmerState":
        return cls(device_id, deque(maxlen=cfg.avg_window))


@dataclass(frozen=True)
class StepResult:
    action: str  # "noop", "cap", "uncap"
    commands: tuple = ()
    reclaim_left: float = 0.0


def moving_average_update(state: DimmerState, reading: float) -> float:
    """Push a 1 s reading; mean of the readings currently in the window."""
    state.window.append(float(reading))
    return sum(state.window) / len(state.window)


def _quantize_down(x: float) -> float:
    return math.floor(x / 10.0 + 1e-9) * 10.0


def dimmed_tdp(cfg: DimmerConfig, pls: float, accelerators: int) -> float:
    """Per-server GPU limit that keeps the server's estimated power at or under ``pls``."""
    if cfg.literal:
        tdp = _quantize_down(pls / accelerators) + cfg.min_tdp
    else:
        spare = max(pls - cfg.server_min_pwr_capped, 0.0)
        tdp = cfg.min_tdp + _quantize_down(spare / accelerators)
    return min(max(tdp, cfg.min_tdp), cfg.base_tdp)


def estimate_capped_power(cfg: DimmerConfig, tdp: float, accelerators: int) -> float:
    return cfg.server_min_pwr_capped + accelerators * (tdp - cfg.min_tdp)


def _event(state: DimmerState, t, reading, limit, action, server_id=None, tdp=None):
    rec = {"t": t, "device_id": state.device_id, "reading_w": reading, "limit_w": limit,
           "action": action, "server_id": server_id, "tdp_w": tdp}
    state.events.append(rec)
    return rec


def dimmer_step(state: DimmerState, cfg: DimmerConfig, groups: Sequence[PriorityGroup],
                now: float, reading: float) -> StepResult:
    """One decision: cap, uncap, or nothing.  ``reading`` is the moving average."""
    limit = cfg.limit
    if reading > limit:
        reclaim = reading - limit
        cmds: list[CapCommand] = []
        ordered = sorted(groups, key=lambda g: g.priority)
        for g in ordered:
            servers = sorted(g.servers, key=lambda s: s.server_id)
            acc = servers[0].accelerator_count
            pls = max((g.power - reclaim) / len(servers), 0.0)
            tdp = dimmed_tdp(cfg, pls, acc)
            prev = [state.active_caps[s.server_id][0] for s in servers if s.server_id in state.active_caps]
            if prev:
                tdp = min(tdp, min(prev))  # never loosen a cap mid-episode
            for s in servers:
                e = estimate_capped_power(cfg, tdp, s.accelerator_count)
                reclaim -= max(0.0, s.avg_power - e)
                cmds.append(CapCommand(s.server_id, tdp, now))
            if reclaim <= 0:
                break
        if reclaim > 0 and groups:
            _event(state, now, reading, limit, "insufficient_reclaim")
            log.info("%s: %.0f W left to reclaim after all groups", state.device_id, reclaim)
            cmds = [CapCommand(s.server_id, cfg.min_tdp, now)
                    for g in ordered for s in sorted(g.servers, key=lambda s: s.server_id)]
        for c in cmds:
            state.active_caps[c.server_id] = (c.tdp, now)
            _event(state, now, reading, limit, CAP, c.server_id, c.tdp)
        if cmds:
            state.last_cap_time = now
        return StepResult(CAP if cmds else "noop", tuple(cmds), max(reclaim, 0.0))

    if state.active_caps and state.last_cap_time is not None \
            and state.last_cap_time + cfg.cap_expiration < now:
        cmds = [CapCommand(sid, cfg.base_tdp, now, UNCAP) for sid in sorted(state.active_caps)]
        for c in cmds:
            _event(state, now, reading, limit, UNCAP, c.server_id, c.tdp)
        state.active_caps.clear()
        state.last_cap_time = None
        return StepResult(UNCAP, tuple(cmds))
    return StepResult("noop")


@dataclass
class HostControl:
    server_id: str
    controller_tdp: float
    last_heartbeat: float = 0.0


def heartbeat_failover(host: HostControl, now: float, cfg: DimmerConfig) -> float:
    """Effective GPU limit on the host given heartbeat freshness."""
    if now - host.last_heartbeat > cfg.heartbeat_timeout:
        return cfg.safe_tdp
    return host.controller_tdp


def groups_from_jobs(jobs: Iterable, avg_power: dict) -> list[PriorityGroup]:
    """One group per job; larger jobs get higher priority (capped later).

    ``avg_power`` maps server id to its current average power.  Ties in job
    size break on job id.  All servers must share one accelerator type.
    """
    by_size = sorted(jobs, key=lambda j: (j.size, j.job_id))
    groups = []
    for prio, job in enumerate(by_size):
        servers = tuple(ServerInfo(h, job.gpus_per_host, float(avg_power[h])) for h in job.server_ids)
        groups.append(PriorityGroup(prio, servers))
    validate_homogeneous(groups)
    return groups


def validate_homogeneous(groups: Sequence[PriorityGroup]) -> None:
    kinds = {s.accelerator_type for g in groups for s in g.servers}
    if len(kinds) > 1:
        raise ValueError(f"mixed accelerator types under one device: {sorted(kinds)}")


def write_event_log(path, events: Iterable[dict]) -> None:
    with open(path, "w") as fh:
        for e in events:
            fh.write(json.dumps(e, sort_keys=True) + "\n")
