"""Power-delivery tree (MSB -> SB -> RPP -> racks) and planned headroom.

Oversubscription is reported, not rejected: planning limits are soft and
hard enforcement belongs to the breaker model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterator, Optional

import numpy as np

__all__ = [
    "Level",
    "RackType",
    "StructureError",
    "EmptyDistributionError",
    "RackAssignment",
    "PowerNode",
    "NodeCheck",
    "ValidationResult",
    "HeadroomReport",
    "validate_tree",
    "planned_headroom",
    "headroom_cdf",
    "iter_nodes",
    "DEFAULT_IT_BUDGET_PER_MSB",
    "RPP_RATING_W",
    "synthetic_placement",
]

DEFAULT_IT_BUDGET_PER_MSB = 2.7e6
MSB_RATING_W = 3.0e6
MECHANICAL_PLAN_W = 3.0e5
RPP_RATING_W = 197.5e3


class Level(str, Enum):
    MSB = "MSB"
    SB = "SB"
    RPP = "RPP"

    @property
    def depth(self) -> int:
        return ("MSB", "SB", "RPP").index(self.value)


class RackType(str, Enum):
    GPU_COMPUTE = "gpu_compute"
    AALC = "aalc"
    NETWORK = "network"
    SUPPORT = "support"
    STORAGE = "storage"


class StructureError(ValueError):
    """Malformed tree; ``node_id`` names the offending node."""

    def __init__(self, node_id: str, message: str):
        super().__init__(f"{node_id}: {message}")
        self.node_id = node_id


class EmptyDistributionError(ValueError):
    pass


@dataclass(frozen=True)
class RackAssignment:
    rack_id: str
    rack_type: RackType
    provisioned_power: float
    gpu_count: int = 0
    priority: int = 0

    def __post_init__(self):
        object.__setattr__(self, "rack_type", RackType(self.rack_type))
        if self.provisioned_power < 0:
            raise StructureError(self.rack_id, "negative provisioned power")
        if (self.gpu_count > 0) != (self.rack_type is RackType.GPU_COMPUTE):
            raise StructureError(self.rack_id, "gpu_count > 0 iff rack_type is gpu_compute")


@dataclass
class PowerNode:
    id: str
    level: Level
    capacity: float
    children: list = field(default_factory=list)
    mechanical_plan: float = 0.0
    mechanical_load_profile: Optional[np.ndarray] = None

    def __post_init__(self):
        self.level = Level(self.level)
        if self.capacity <= 0:
            raise StructureError(self.id, "capacity must be positive")

    @property
    def nodes(self) -> list["PowerNode"]:
        return [c for c in self.children if isinstance(c, PowerNode)]

    @property
    def racks(self) -> list[RackAssignment]:
        return [c for c in self.children if isinstance(c, RackAssignment)]

    def iter_racks(self) -> Iterator[RackAssignment]:
        for c in self.children:
            if isinstance(c, PowerNode):
                yield from c.iter_racks()
            else:
                yield c

    def provisioned(self) -> float:
        return sum(r.provisioned_power for r in self.iter_racks())

    def gpus(self) -> int:
        return sum(r.gpu_count for r in self.iter_racks())

    def it_budget(self, it_budget_per_msb: float = DEFAULT_IT_BUDGET_PER_MSB) -> float:
        if self.level is Level.MSB:
            return it_budget_per_msb
        return self.capacity


def _roots(root) -> list[PowerNode]:
    return [root] if isinstance(root, PowerNode) else list(root)


def iter_nodes(root) -> Iterator[PowerNode]:
    """Pre-order walk of one tree or a sequence of trees."""
    for r in _roots(root):
        yield r
        for c in r.nodes:
            yield from iter_nodes(c)


def _check_structure(root) -> None:
    seen_nodes: set[int] = set()
    seen_racks: dict[str, str] = {}

    def visit(node: PowerNode, parent_depth: int):
        if id(node) in seen_nodes:
            raise StructureError(node.id, "node appears twice (cycle or shared subtree)")
        seen_nodes.add(id(node))
        if node.level.depth <= parent_depth:
            raise StructureError(node.id, f"{node.level.value} cannot sit below depth {parent_depth}")
        for child in node.children:
            if isinstance(child, PowerNode):
                visit(child, node.level.depth)
            elif isinstance(child, RackAssignment):
                if node.level is not Level.RPP:
                    raise StructureError(child.rack_id, f"rack attached to {node.level.value} {node.id}")
                if child.rack_id in seen_racks:
                    raise StructureError(child.rack_id, "rack attached to more than one RPP")
                seen_racks[child.rack_id] = node.id
            else:
                raise StructureError(node.id, f"unexpected child {child!r}")

    for r in _roots(root):
        visit(r, -1)


@dataclass(frozen=True)
class NodeCheck:
    node_id: str
    level: Level
    capacity: float
    load: float

    @property
    def slack(self) -> float:
        return self.capacity - self.load

    @property
    def oversubscribed(self) -> bool:
        return self.load > self.capacity

    @property
    def excess(self) -> float:
        return max(self.load - self.capacity, 0.0)


@dataclass(frozen=True)
class ValidationResult:
    checks: dict

    @property
    def flagged(self) -> list[str]:
        return [k for k, c in self.checks.items() if c.oversubscribed]

    @property
    def ok(self) -> bool:
        return not self.flagged


def validate_tree(root) -> ValidationResult:
    """Per-node load vs rating. MSB load includes the planned mechanical load."""
    _check_structure(root)
    checks = {}
    for n in iter_nodes(root):
        load = n.provisioned() + (n.mechanical_plan if n.level is Level.MSB else 0.0)
        checks[n.id] = NodeCheck(n.id, n.level, n.capacity, load)
    return ValidationResult(checks)


@dataclass(frozen=True)
class HeadroomReport:
    per_node: dict
    per_gpu_headroom: dict
    stranded_fraction: float
    levels: dict
    rows: tuple = ()
    cdf_points: tuple = ()

    def values(self, level: Level) -> list[float]:
        level = Level(level)
        return [h for nid, h in self.per_node.items() if self.levels[nid] is level]


def planned_headroom(root, it_budget_per_msb: float = DEFAULT_IT_BUDGET_PER_MSB) -> HeadroomReport:
    """Budget minus provisioned rack power under every node.

    MSBs are measured against the IT budget (mechanical load is tracked
    separately).  Per-GPU headroom is ``None`` for nodes without GPUs.
    """
    _check_structure(root)
    per_node, per_gpu, levels, rows = {}, {}, {}, []
    pos_total = budget_total = 0.0
    tops = {id(r) for r in _roots(root)}
    for n in iter_nodes(root):
        budget = n.it_budget(it_budget_per_msb)
        prov = n.provisioned()
        h = budget - prov
        gpus = n.gpus()
        per_node[n.id] = h
        levels[n.id] = n.level
        per_gpu[n.id] = h / gpus if gpus else None
        rows.append({
            "node_id": n.id, "level": n.level.value, "capacity_w": budget,
            "provisioned_w": prov, "headroom_w": h, "gpus": gpus,
            "headroom_per_gpu_w": per_gpu[n.id],
        })
        if id(n) in tops:
            pos_total += max(h, 0.0)
            budget_total += budget
    stranded = pos_total / budget_total if budget_total else 0.0
    report = HeadroomReport(per_node, per_gpu, min(max(stranded, 0.0), 1.0), levels, tuple(rows))
    return replace(report, cdf_points=tuple(headroom_cdf(report, _roots(root)[0].level)))


def headroom_cdf(report: HeadroomReport, level: Level, per_gpu: bool = False) -> list[tuple[float, float]]:
    """Empirical CDF of headroom over nodes at ``level``: (value, fraction <= value)."""
    level = Level(level)
    source = report.per_gpu_headroom if per_gpu else report.per_node
    vals = sorted(v for nid, v in source.items() if report.levels[nid] is level and v is not None)
    if not vals:
        raise EmptyDistributionError(f"no {level.value} nodes with headroom values")
    n = len(vals)
    points = []
    for i, v in enumerate(vals):
        if points and math.isclose(points[-1][0], v, rel_tol=0, abs_tol=1e-9):
            points[-1] = (v, (i + 1) / n)
        else:
            points.append((v, (i + 1) / n))
    return points


def synthetic_placement(n_msb: int = 54, gpu_racks_per_msb: int = 42, rack_power: float = 49_600.0,
                        gpus_per_rack: int = 36, low_fraction: float = 0.13, seed: int = 0,
                        it_budget_per_msb: float = DEFAULT_IT_BUDGET_PER_MSB,
                        sb_capacity: float = 1.25e6, rpps_per_sb: int = 5) -> list[PowerNode]:
    """Seeded fleet placement whose MSB headroom has a thin low tail.

    ``round(low_fraction * n_msb)`` MSBs keep 15-48 kW of headroom, the rest
    120-240 kW.  Each MSB holds ``gpu_racks_per_msb`` GPU racks, three per
    RPP; support racks fill the remaining budget, topping up each RPP to a
    random 2-36 kW of headroom before opening support-only RPPs.
    """
    rng = np.random.default_rng(seed)
    n_low = int(round(low_fraction * n_msb))
    low = set(rng.choice(n_msb, size=n_low, replace=False).tolist()) if n_low else set()
    msbs = []
    for m in range(n_msb):
        h = rng.uniform(15e3, 48e3) if m in low else rng.uniform(120e3, 240e3)
        support = it_budget_per_msb - gpu_racks_per_msb * rack_power - h
        if support < 0:
            raise ValueError(f"GPU racks alone exceed the MSB budget at msb {m}")
        rpps = []
        k = 0
        while k < gpu_racks_per_msb or support > 1.0:
            rid = f"m{m:02d}r{len(rpps):02d}"
            kids = []
            for _ in range(min(3, gpu_racks_per_msb - k)):
                kids.append(RackAssignment(f"{rid}k{len(kids)}", RackType.GPU_COMPUTE, rack_power, gpus_per_rack))
                k += 1
            room = RPP_RATING_W - len(kids) * rack_power - rng.uniform(2e3, 36e3)
            s = min(max(room, 0.0), support)
            if s > 0:
                kids.append(RackAssignment(f"{rid}sup", RackType.SUPPORT, s))
                support -= s
            rpps.append(PowerNode(rid, Level.RPP, RPP_RATING_W, kids))
        sbs = [PowerNode(f"m{m:02d}s{i // rpps_per_sb}", Level.SB, sb_capacity, rpps[i:i + rpps_per_sb])
               for i in range(0, len(rpps), rpps_per_sb)]
        msbs.append(PowerNode(f"m{m:02d}", Level.MSB, MSB_RATING_W, sbs, mechanical_plan=MECHANICAL_PLAN_W))
    return msbs
