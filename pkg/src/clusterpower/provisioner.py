"""Phase-1 provisioning: how many GPUs at which power limit.

The relaxed problem picks one power limit for the whole datacenter,

    T(p) = N(p) * f(p),    N(p) = min(floor(B / g(p)), N_max)

where ``B`` is the rack budget left after the overhead ledger.  The
hierarchical problem picks one limit per rack subject to every RPP, SB and
MSB rating and is solved by even (water-filling) reduction inside violated subtrees.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence, Union

import numpy as np

from .hierarchy import Level, PowerNode, RackType, iter_nodes, validate_tree
from .powerperf import GRID_W, CurveSet, f_eval, maximize_eta
from .rackmodel import (
    NetworkPowerModel,
    RackModel,
    network_power_per_gpu,
    provisioned_rack_power,
)

__all__ = [
    "InfeasibleError",
    "ProvisionInputs",
    "ProvisionResult",
    "HierAssignment",
    "ScenarioColumn",
    "power_ledger",
    "n_of_p",
    "per_gpu_power",
    "throughput",
    "solve_relaxed",
    "solve_hierarchical",
    "evaluate_column",
    "compare_scenarios",
    "reference_columns",
]


class InfeasibleError(RuntimeError):
    """No assignment fits the budget; ``nodes`` names the culprits if known."""

    def __init__(self, message: str, nodes: Sequence[str] = ()):
        super().__init__(message)
        self.nodes = list(nodes)


@dataclass(frozen=True)
class ProvisionInputs:
    """Datacenter budget and the overhead ledger.

    Deductions run in order: turn-up reserve, IT oversubscription credit
    (a multiplier on what is left), network share, then support services and
    AALC as shares of the remaining power.  ``network_fraction=None`` charges
    network per GPU from the switch model instead.
    """

    dc_power: float = 150e6
    turnup_reserve: float = 10e6
    it_oversubscription: float = 0.08
    network_fraction: Optional[float] = 0.08
    support_fraction: float = 0.10
    aalc_fraction: float = 0.03
    n_max: Optional[int] = None
    p_min: float = 900.0
    p_max: float = 1200.0
    label: str = "GB200"

    def __post_init__(self):
        if self.dc_power <= 0:
            raise ValueError("dc_power must be positive")
        if not self.p_min < self.p_max:
            raise ValueError("p_min must be below p_max")
        fracs = [self.it_oversubscription, self.support_fraction, self.aalc_fraction]
        if self.network_fraction is not None:
            fracs.append(self.network_fraction)
        if any(not 0.0 <= x < 1.0 for x in fracs):
            raise ValueError("ledger fractions must be in [0, 1)")
        if self.support_fraction + self.aalc_fraction >= 1.0:
            raise ValueError("support + AALC shares leave nothing for racks")


def power_ledger(inputs: ProvisionInputs) -> dict:
    """Ledger in watts; ``racks`` is the budget available to IT racks.

    The entries sum to ``dc_power`` (the oversubscription credit is negative).
    """
    usable = inputs.dc_power - inputs.turnup_reserve
    if usable <= 0:
        raise InfeasibleError("turn-up reserve consumes the whole budget")
    credited = usable * (1.0 + inputs.it_oversubscription)
    network = credited * (inputs.network_fraction or 0.0)
    pool = credited - network
    support = pool * inputs.support_fraction
    aalc = pool * inputs.aalc_fraction
    racks = pool - support - aalc
    if racks <= 0:
        raise InfeasibleError("overheads consume the whole budget")
    return {
        "turnup_reserve": inputs.turnup_reserve,
        "it_oversubscription": -(credited - usable),
        "network": network,
        "support_services": support,
        "aalc": aalc,
        "racks": racks,
    }


def n_of_p(inputs: ProvisionInputs, g: float) -> int:
    """GPUs that fit the rack budget at ``g`` watts per GPU, capped at N_max."""
    if g <= 0:
        raise ValueError("per-GPU power must be positive")
    n = int(math.floor(power_ledger(inputs)["racks"] / g))
    return n if inputs.n_max is None else min(n, inputs.n_max)


def per_gpu_power(inputs: ProvisionInputs, model: RackModel, net: Optional[NetworkPowerModel], p: float) -> float:
    """Provisioned power charged per GPU: q(p)/n_r, plus switches if not a ledger share."""
    g = provisioned_rack_power(model, p).provisioned / model.gpu_count_per_rack
    if inputs.network_fraction is None and net is not None:
        g += network_power_per_gpu(net)
    return g


def _eta_net(inputs, net):
    return net if inputs.network_fraction is None else None


def _n_at(inputs, model, net, p):
    return n_of_p(inputs, per_gpu_power(inputs, model, net, p))


def throughput(inputs: ProvisionInputs, curves: CurveSet, model: RackModel,
               net: Optional[NetworkPowerModel], p: float) -> float:
    """Cluster throughput N(p) f(p), normalized to the p_max configuration."""
    ref = _n_at(inputs, model, net, inputs.p_max) * f_eval(curves, inputs.p_max)
    return _n_at(inputs, model, net, p) * f_eval(curves, p) / ref


@dataclass(frozen=True)
class ProvisionResult:
    p_star: float
    n_gpus: int
    throughput: float
    per_gpu_perf: float
    rack_count: int
    power_ledger: dict
    eta: float = float("nan")
    unimodal: bool = True
    label: str = ""


def solve_relaxed(inputs: ProvisionInputs, curves: CurveSet, model: RackModel,
                  net: Optional[NetworkPowerModel]) -> ProvisionResult:
    """Single datacenter-wide power limit maximizing performance per watt."""
    opt = maximize_eta(curves, model, _eta_net(inputs, net), inputs.p_min, inputs.p_max)
    p = opt.p
    if inputs.n_max is not None and _n_at(inputs, model, net, p) >= inputs.n_max:
        # Density is capped: spend the spare power on higher limits instead.
        grid = np.arange(p, inputs.p_max + 1e-9, GRID_W)
        fits = [float(q) for q in grid if _n_at(inputs, model, net, float(q)) >= inputs.n_max]
        p = fits[-1] if fits else p
        if inputs.p_max - p < GRID_W and _n_at(inputs, model, net, inputs.p_max) >= inputs.n_max:
            p = inputs.p_max
    return result_at(inputs, curves, model, net, p, eta=opt.eta, unimodal=opt.unimodal)


def result_at(inputs, curves, model, net, p, eta=float("nan"), unimodal=True) -> ProvisionResult:
    n_r = model.gpu_count_per_rack
    n = _n_at(inputs, model, net, p)
    # Whole racks, except that an N_max cap may leave one partly filled rack
    # charged pro rata.
    n_gpus = n if inputs.n_max is not None and n == inputs.n_max else (n // n_r) * n_r
    racks = -(-n_gpus // n_r)
    ledger = power_ledger(inputs)
    q = provisioned_rack_power(model, p).provisioned
    used = n_gpus / n_r * q
    if inputs.network_fraction is None and net is not None:
        ledger["network"] = n_gpus * network_power_per_gpu(net)
        used += ledger["network"]
    ledger["unallocated"] = ledger["racks"] - used
    ledger["racks"] = n_gpus / n_r * q
    f = f_eval(curves, p)
    return ProvisionResult(p, n_gpus, n_gpus * f, f, racks, ledger, eta, unimodal, inputs.label)


# --- labeled scenario comparison -------------------------------------------


@dataclass(frozen=True)
class ScenarioColumn:
    """One column of the accelerator / power-limit comparison.

    ``rack_power`` overrides the rack model's provisioned power when the
    accelerator has no component model (e.g. a reference generation).
    """

    label: str
    inputs: ProvisionInputs
    p: float
    gpus_per_rack: int
    per_gpu_perf: float
    rack_power: Optional[float] = None
    model: Optional[RackModel] = None


def evaluate_column(col: ScenarioColumn, net: Optional[NetworkPowerModel] = None) -> dict:
    ledger = power_ledger(col.inputs)
    if col.rack_power is not None:
        q = col.rack_power
    elif col.model is not None:
        q = provisioned_rack_power(col.model, col.p).provisioned
    else:
        raise ValueError(f"{col.label}: need rack_power or a rack model")
    per_rack = q
    if col.inputs.network_fraction is None and net is not None:
        per_rack += col.gpus_per_rack * network_power_per_gpu(net)
    racks = int(math.floor(ledger["racks"] / per_rack))
    gpus = racks * col.gpus_per_rack
    if col.inputs.n_max is not None:
        gpus = min(gpus, col.inputs.n_max)
    return {
        "label": col.label,
        "power_limit_w": col.p,
        "dc_power_w": col.inputs.dc_power,
        "it_oversubscription": col.inputs.it_oversubscription,
        "gpus_per_rack": col.gpus_per_rack,
        "rack_power_budget_w": q,
        "network_fraction": col.inputs.network_fraction,
        "turnup_reserve_w": col.inputs.turnup_reserve,
        "support_fraction": col.inputs.support_fraction,
        "aalc_fraction": col.inputs.aalc_fraction,
        "racks_aalc_support_w": ledger["racks"] + ledger["support_services"] + ledger["aalc"],
        "total_rack_power_w": ledger["racks"],
        "racks": racks,
        "gpus": gpus,
        "per_gpu_perf": col.per_gpu_perf,
        "aggregate_perf": gpus * col.per_gpu_perf,
    }


def compare_scenarios(columns: Sequence[ScenarioColumn], reference: Optional[str] = None,
                      net: Optional[NetworkPowerModel] = None) -> list[dict]:
    """Evaluate every column and normalize aggregate performance to ``reference``."""
    rows = [evaluate_column(c, net) for c in columns]
    ref_label = reference or rows[0]["label"]
    ref = next(r for r in rows if r["label"] == ref_label)
    for r in rows:
        r["aggregate_perf_norm"] = r["aggregate_perf"] / ref["aggregate_perf"]
    return rows


def reference_columns(model: Optional[RackModel] = None) -> list[ScenarioColumn]:
    """H100 reference plus GB200 at 960 W and 1200 W."""
    from .rackmodel import catalina_gb200

    model = model or catalina_gb200()
    h100 = ProvisionInputs(it_oversubscription=0.0, network_fraction=0.06, aalc_fraction=0.0,
                           p_min=500.0, p_max=700.0, label="H100 (700W)")
    gb = ProvisionInputs(label="GB200")
    return [
        ScenarioColumn("H100 (700W)", h100, 700.0, 16, 1.0, rack_power=17.7e3),
        ScenarioColumn("GB200 (960W)", gb, 960.0, 36, 2.4, model=model),
        ScenarioColumn("GB200 (1200W)", gb, 1200.0, 36, 2.5, model=model),
    ]


# --- hierarchical per-rack limits -------------------------------------------


@dataclass(frozen=True)
class HierAssignment:
    per_rack_limits: dict
    objective: float
    binding_constraints: list = field(default_factory=list)
    iterations: int = 0


RackModels = Union[RackModel, Mapping[str, RackModel]]


def _model_for(models: RackModels, rack_id: str) -> RackModel:
    if isinstance(models, RackModel):
        return models
    return models[rack_id]


class _Tree:
    """Flattened view: rack -> ancestor nodes, fixed loads, affine q_k."""

    def __init__(self, roots, models: RackModels):
        self.nodes = list(iter_nodes(roots))
        self.gpu_racks: list[str] = []
        self.n: dict[str, int] = {}
        self.q0: dict[str, float] = {}
        self.slope: dict[str, float] = {}
        self.under: dict[str, list[str]] = {}
        self.above: dict[str, list[str]] = {}
        self.fixed: dict[str, float] = {}
        self.depth = {n.id: n.level.depth for n in self.nodes}
        self.cap = {n.id: n.capacity for n in self.nodes}
        for node in self.nodes:
            fixed = node.mechanical_plan if node.level is Level.MSB else 0.0
            racks = []
            for r in node.iter_racks():
                if r.rack_type is RackType.GPU_COMPUTE:
                    racks.append(r.rack_id)
                    if r.rack_id not in self.n:
                        m = _model_for(models, r.rack_id)
                        a = provisioned_rack_power(m, 0.0).provisioned
                        b = provisioned_rack_power(m, 1.0).provisioned - a
                        scale = r.gpu_count / m.gpu_count_per_rack
                        self.gpu_racks.append(r.rack_id)
                        self.n[r.rack_id] = r.gpu_count
                        self.q0[r.rack_id] = a * scale
                        self.slope[r.rack_id] = b * scale
                else:
                    fixed += r.provisioned_power
            self.under[node.id] = racks
            for k in racks:
                self.above.setdefault(k, []).append(node.id)
            self.fixed[node.id] = fixed

    def q(self, rack: str, p: float) -> float:
        return self.q0[rack] + self.slope[rack] * p

    def load(self, node: str, limits: Mapping[str, float]) -> float:
        return self.fixed[node] + sum(self.q(k, limits[k]) for k in self.under[node])

    def violations(self, limits, tol=1e-6) -> list[str]:
        bad = [n.id for n in self.nodes if self.load(n.id, limits) > self.cap[n.id] + tol]
        return sorted(bad, key=lambda nid: -self.depth[nid])


def solve_hierarchical(hierarchy, curves: CurveSet, models: RackModels,
                       net: Optional[NetworkPowerModel] = None,
                       p_min: Optional[float] = None, p_max: Optional[float] = None,
                       max_iter: int = 1000, method: str = "exact") -> HierAssignment:
    """Per-rack power limits under every node rating, equal within each RPP.

    ``method="exact"`` (default) searches every assignment of one 10 W-grid
    limit per RPP and returns the best; it never does worse than even
    reduction and its objective cannot fall when a rating rises.

    ``method="even"`` is the iterative even reduction: start every GPU rack
    at ``p_max``; each pass walks the violated nodes deepest first and
    water-fills downward, so the highest-limit racks beneath the node come
    down together to a common level, just enough to clear it.  Limits are
    then floored onto the 10 W grid and freed slack is handed back in 10 W
    steps.  Cheap and close, but not monotone in the ratings.

    ``binding_constraints`` lists the nodes violated with every GPU at
    ``p_max``, deepest first.  ``net`` is accepted for symmetry with the
    relaxed solver; switch racks enter the tree as fixed loads.
    """
    del net
    if method not in ("exact", "even"):
        raise ValueError(f"unknown method {method!r}")
    validate_tree(hierarchy)
    lo = curves.p_min if p_min is None else p_min
    hi = curves.p_max if p_max is None else p_max
    _check_concave(curves, lo, hi)
    tree = _Tree(hierarchy, models)

    stuck = tree.violations({k: lo for k in tree.gpu_racks})
    if stuck:
        raise InfeasibleError("infeasible even with every GPU at p_min", stuck)
    binding = tree.violations({k: hi for k in tree.gpu_racks})

    if method == "exact":
        final, it = _group_search(hierarchy, tree, curves, lo, hi), 1
    else:
        final, it = _even_reduction(tree, lo, hi, max_iter)
    objective = sum(tree.n[k] * f_eval(curves, p) for k, p in final.items())
    return HierAssignment(final, objective, binding, it)


def _even_reduction(tree: _Tree, lo: float, hi: float, max_iter: int):
    limits = {k: hi for k in tree.gpu_racks}
    it = 0
    for it in range(1, max_iter + 1):
        bad = tree.violations(limits)
        if not bad:
            break
        for nid in bad:
            excess = tree.load(nid, limits) - tree.cap[nid]
            if excess <= 1e-6:
                continue
            movable = [k for k in tree.under[nid] if limits[k] > lo + 1e-9]
            if not movable:
                raise InfeasibleError(f"{nid} cannot be cleared", [nid])
            level = _water_level(limits, tree.slope, movable, excess, lo)
            for k in movable:
                limits[k] = min(limits[k], level)
    else:
        raise InfeasibleError("reduction did not converge", tree.violations(limits))
    final = {k: _floor_grid(v, lo) for k, v in limits.items()}
    _spend_slack(tree, final, hi)
    return final, it


def _pareto(load, value, picks):
    """Drop (load, value) points beaten by a lower-load, higher-value one."""
    # equal sums reached in different orders must tie, or the front balloons
    load, value = np.round(load, 6), np.round(value, 9)
    order = np.lexsort((-value, load))
    load, value, picks = load[order], value[order], picks[order]
    best_before = np.maximum.accumulate(np.concatenate([[-np.inf], value[:-1]]))
    keep = value > best_before
    return load[keep], value[keep], picks[keep]


def _group_search(hierarchy, tree: _Tree, curves: CurveSet, lo: float, hi: float) -> dict:
    """Best objective with one 10 W-grid limit per RPP, exact.

    Each node keeps the Pareto front of (load, value) over its subtree's
    RPP choices, cut at its rating.  Pruning only removes points another
    point beats at every ancestor, so the optimum survives; and because the
    search is exact, raising a rating can only add feasible points.
    Racks sharing a rack model make the fronts grow roughly linearly in
    the number of RPPs.
    """
    grid = lo + GRID_W * np.arange(math.floor((hi - lo) / GRID_W + 1e-9) + 1)
    fv = np.array([f_eval(curves, p) for p in grid])
    rpp_racks: list[list[str]] = []

    def front(node):
        if node.level is Level.RPP:
            ks = [r.rack_id for r in node.racks if r.rack_type is RackType.GPU_COMPUTE]
            fixed = sum(r.provisioned_power for r in node.racks if r.rack_type is not RackType.GPU_COMPUTE)
            col = len(rpp_racks)
            rpp_racks.append(ks)
            load = fixed + sum(tree.q0[k] + tree.slope[k] * grid for k in ks) * np.ones_like(grid)
            value = sum(tree.n[k] for k in ks) * fv
            picks = np.full((len(grid), 1), -1, dtype=np.int64)
            picks[:, 0] = np.arange(len(grid))
            cols = [col]
            if not ks:
                load, value, picks = load[:1], value[:1], picks[:1]
        else:
            load = np.array([node.mechanical_plan if node.level is Level.MSB else 0.0])
            value = np.zeros(1)
            picks = np.zeros((1, 0), dtype=np.int64)
            cols = []
            for child in node.nodes:
                cl, cv, cp, cc = front(child)
                i, j = np.divmod(np.arange(len(load) * len(cl)), len(cl))
                load, value = load[i] + cl[j], value[i] + cv[j]
                picks = np.hstack([picks[i], cp[j]])
                cols += cc
                load, value, picks = _pareto(load, value, picks)
        ok = load <= node.capacity + 1e-6
        if not ok.any():
            raise InfeasibleError(f"{node.id} cannot be cleared", [node.id])
        load, value, picks = _pareto(load[ok], value[ok], picks[ok])
        return load, value, picks, cols

    roots = list(hierarchy) if isinstance(hierarchy, (list, tuple)) else [hierarchy]
    out = {}
    for root in roots:
        _, value, picks, cols = front(root)
        best = picks[int(np.argmax(value))]
        for c, g in zip(cols, best):
            for k in rpp_racks[c]:
                out[k] = float(grid[g])
    return out


def _water_level(limits, slope, racks, excess: float, lo: float) -> float:
    """Common limit L so that capping every rack at L frees ``excess`` watts.

    Racks already below L keep their limit, so the highest racks come down
    first and end equal.  Never below ``lo``.
    """
    ps = sorted({limits[k] for k in racks}, reverse=True) + [lo]
    freed = 0.0
    for hi_p, lo_p in zip(ps, ps[1:]):
        w = sum(slope[k] for k in racks if limits[k] >= hi_p - 1e-9)
        if freed + w * (hi_p - lo_p) >= excess:
            return hi_p - (excess - freed) / w
        freed += w * (hi_p - lo_p)
    return lo


def _spend_slack(tree: _Tree, limits: dict, hi: float) -> None:
    """Give back what grid flooring left unused, 10 W at a time.

    Racks of one RPP move together so they stay equal.  The lowest group is
    tried first (steepest part of a concave f); stops when no group fits.
    """
    groups: dict = {}
    for node in tree.nodes:
        if node.level is Level.RPP:
            for k in tree.under[node.id]:
                groups.setdefault((node.id, limits[k]), []).append(k)
    groups = list(groups.values())
    while True:
        for ks in sorted(groups, key=lambda ks: (limits[ks[0]], ks[0])):
            if limits[ks[0]] + GRID_W > hi + 1e-9:
                continue
            for k in ks:
                limits[k] += GRID_W
            if all(tree.load(n, limits) <= tree.cap[n] + 1e-6 for n in tree.above[ks[0]]):
                break
            for k in ks:
                limits[k] -= GRID_W
        else:
            return


def _floor_grid(p: float, lo: float) -> float:
    return lo + GRID_W * math.floor((p - lo) / GRID_W + 1e-9)


def _check_concave(curves: CurveSet, lo: float, hi: float) -> None:
    pts = [(p, v) for p, v in curves.f_anchors if lo - 1e-9 <= p <= hi + 1e-9]
    slopes = [(v2 - v1) / (p2 - p1) for (p1, v1), (p2, v2) in zip(pts, pts[1:])]
    if any(b > a + 1e-12 for a, b in zip(slopes, slopes[1:])):
        raise ValueError("f is not concave on the requested range")


def independent_loads(hierarchy, models: RackModels, limits: Mapping[str, float]) -> dict:
    """Recompute every node load from scratch (used to audit assignments)."""
    out = {}
    for node in iter_nodes(hierarchy):
        load = node.mechanical_plan if node.level is Level.MSB else 0.0
        for r in node.iter_racks():
            if r.rack_type is RackType.GPU_COMPUTE:
                m = _model_for(models, r.rack_id)
                load += provisioned_rack_power(m, limits[r.rack_id]).provisioned * r.gpu_count / m.gpu_count_per_rack
            else:
                load += r.provisioned_power
        out[node.id] = (load, node.capacity)
    return out
