"""Rack power composition.

A rack is a list of components, each with a unit power, a count and a
utilization derate.  The GPU entry is special: its unit power is the
configured per-GPU power limit ``p``.  From the component sum we build

    DC power          = sum(unit_power * count * derate)
    AC power          = DC * (1 + ac_dc_loss) / (1 - psu_loss)
    provisioned power = global_derate * AC                      (q_k(p))
    max AC            = AC of the nameplate rack (no derates, GPU at TDP,
                        VR and fan losses charged)

and the per-GPU datacenter power

    g(p) = (p + P_fix / n_r + P_net) / global_derate

The default component table is the Catalina GB200 rack.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

__all__ = [
    "ConfigurationError",
    "ComponentSpec",
    "LossRule",
    "LossChain",
    "RackModel",
    "NetworkPowerModel",
    "RackPower",
    "catalina_gb200",
    "backend_network",
    "rack_dc_power",
    "rack_ac_power",
    "provisioned_rack_power",
    "max_ac_power",
    "psu_loss_watts",
    "fixed_power_per_gpu",
    "g_of_p",
    "network_power_per_gpu",
    "breakdown",
]

SERVER_LEVEL = "server_level"
RACK_LEVEL = "rack_level"


class ConfigurationError(ValueError):
    """Raised for an inconsistent rack or network configuration."""


@dataclass(frozen=True)
class ComponentSpec:
    name: str
    unit_power: float
    count: float
    derate: float = 1.0
    scope: str = SERVER_LEVEL

    def __post_init__(self):
        if self.unit_power < 0 or self.count < 0:
            raise ConfigurationError(f"{self.name}: negative power or count")
        if not 0.0 < self.derate <= 1.0:
            raise ConfigurationError(f"{self.name}: derate must be in (0, 1]")
        if self.scope not in (SERVER_LEVEL, RACK_LEVEL):
            raise ConfigurationError(f"{self.name}: unknown scope {self.scope!r}")

    def power(self, derated: bool = True) -> float:
        base = self.unit_power * self.count
        return base * self.derate if derated else base


@dataclass(frozen=True)
class LossRule:
    """A loss charged as ``fraction`` of the nameplate power of ``components``."""

    fraction: float
    components: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 <= self.fraction < 0.5:
            raise ConfigurationError("loss fraction must be in [0, 0.5)")


# VR loss covers the non CPU/GPU components; fans cover the air-cooled ones.
_VR_COMPONENTS = ("Back. NIC", "Front. NIC", "SSD", "Misc", "NVSwitch", "OSFPs", "Fabric Mg.")
_FAN_COMPONENTS = ("Front. NIC", "SSD", "Misc", "Fabric Mg.", "FE + optics", "Mg. logic")


@dataclass(frozen=True)
class LossChain:
    """Loss rows of the rack table.

    ``vr`` and ``fans`` are sized on nameplate power and only enter the
    nameplate (max AC) figure; the derated per-component utilization already
    absorbs them in the operating estimate.  ``psu_loss`` is a fraction of
    the AC input, ``ac_dc_loss`` a fraction of the DC load.
    """

    vr: LossRule = LossRule(0.15, _VR_COMPONENTS)
    fans: LossRule = LossRule(0.07, _FAN_COMPONENTS)
    psu_loss: float = 0.04
    ac_dc_loss: float = 0.01717

    def __post_init__(self):
        for name in ("psu_loss", "ac_dc_loss"):
            if not 0.0 <= getattr(self, name) < 0.5:
                raise ConfigurationError(f"{name} must be in [0, 0.5)")

    @property
    def vr_loss(self) -> float:
        return self.vr.fraction

    @property
    def fan_fraction(self) -> float:
        return self.fans.fraction

    @classmethod
    def lossless(cls) -> "LossChain":
        return cls(LossRule(0.0), LossRule(0.0), 0.0, 0.0)


@dataclass(frozen=True)
class RackModel:
    components: tuple[ComponentSpec, ...]
    losses: LossChain = field(default_factory=LossChain)
    gpu_count_per_rack: int = 36
    gpu_component: str = "GPU+HBM"
    global_derate: float = 0.90
    aalc_fraction: float = 0.03
    gpu_tdp: float = 1200.0
    name: str = "rack"

    def __post_init__(self):
        if self.gpu_count_per_rack <= 0:
            raise ConfigurationError("gpu_count_per_rack must be positive")
        if not 0.0 < self.global_derate <= 1.0:
            raise ConfigurationError("global_derate must be in (0, 1]")
        names = [c.name for c in self.components]
        if len(set(names)) != len(names):
            raise ConfigurationError("duplicate component names")

    def component(self, name: str) -> ComponentSpec:
        for c in self.components:
            if c.name == name:
                return c
        raise ConfigurationError(f"unknown component {name!r}")

    @property
    def gpu(self) -> ComponentSpec:
        return self.component(self.gpu_component)

    def with_gpu_power(self, p: float) -> "RackModel":
        comps = tuple(
            replace(c, unit_power=p) if c.name == self.gpu_component else c
            for c in self.components
        )
        return replace(self, components=comps)

    def gpu_power_fraction(self, p: float) -> float:
        """GPU share of rack DC power at limit ``p`` (diagnostic only)."""
        dc = rack_dc_power(self, p)
        return p * self.gpu.count * self.gpu.derate / dc if dc > 0 else 0.0


@dataclass(frozen=True)
class NetworkPowerModel:
    """Back-end switch tiers: (label, power per switch rack in W, racks per 2 IT racks)."""

    switch_tiers: tuple[tuple[str, float, float], ...]
    gpus_per_two_racks: int = 72

    def __post_init__(self):
        for label, power, count in self.switch_tiers:
            if count <= 0 or power < 0:
                raise ConfigurationError(f"tier {label}: invalid power/count")

    @property
    def power_per_two_racks(self) -> float:
        if not self.switch_tiers:
            raise ConfigurationError("network model has no switch tiers")
        return sum(power * count for _, power, count in self.switch_tiers)


@dataclass(frozen=True)
class RackPower:
    provisioned: float
    max_ac: float


def catalina_gb200(p: float = 960.0) -> RackModel:
    """Default GB200 rack: 36 GPUs, server- and rack-level rows."""
    s, r = SERVER_LEVEL, RACK_LEVEL
    comps = (
        ComponentSpec("GPU+HBM", p, 36, 1.00, s),
        ComponentSpec("CPU+DIMM", 100, 36, 1.00, s),
        ComponentSpec("Back. NIC", 66, 36, 0.90, s),
        ComponentSpec("Front. NIC", 18, 36, 0.80, s),
        ComponentSpec("SSD", 15, 36, 0.60, s),
        ComponentSpec("Misc", 50, 18, 0.50, s),
        ComponentSpec("NVSwitch", 580, 18, 0.90, s),
        ComponentSpec("OSFPs", 4, 162, 0.90, s),
        ComponentSpec("Fabric Mg.", 100, 9, 0.50, s),
        ComponentSpec("FE + optics", 350, 2, 1.00, r),
        ComponentSpec("Mg. logic", 100, 1, 1.00, r),
    )
    return RackModel(comps, name="catalina-gb200")


def backend_network() -> NetworkPowerModel:
    """Three-tier back-end fabric, per pair of IT racks."""
    return NetworkPowerModel((("RS", 1880.0, 3.0), ("FS", 1880.0, 0.5), ("SS", 1990.0, 2.25)))


def _component_sum(model: RackModel, p: float, derated: bool) -> float:
    model.gpu  # raises on an unknown GPU reference
    total = 0.0
    for c in model.components:
        if c.name == model.gpu_component:
            c = replace(c, unit_power=p)
        total += c.power(derated)
    return total


def _loss_term(model: RackModel, rule: LossRule, p: float) -> float:
    if rule.fraction == 0.0:
        return 0.0
    base = 0.0
    for name in rule.components:
        c = model.component(name)
        base += (p * c.count) if name == model.gpu_component else c.power(derated=False)
    return rule.fraction * base


def rack_dc_power(model: RackModel, p: float) -> float:
    """Derated DC rack power at per-GPU limit ``p`` (W)."""
    return _component_sum(model, p, derated=True)


def _to_ac(model: RackModel, dc: float) -> float:
    losses = model.losses
    return dc * (1.0 + losses.ac_dc_loss) / (1.0 - losses.psu_loss)


def rack_ac_power(model: RackModel, p: float) -> float:
    return _to_ac(model, rack_dc_power(model, p))


def psu_loss_watts(model: RackModel, p: float) -> float:
    return model.losses.psu_loss * rack_ac_power(model, p)


def max_ac_power(model: RackModel) -> float:
    """Nameplate AC power: no derates, GPU at its TDP, VR and fans charged."""
    p = model.gpu_tdp
    dc = _component_sum(model, p, derated=False)
    dc += _loss_term(model, model.losses.vr, p) + _loss_term(model, model.losses.fans, p)
    return _to_ac(model, dc)


def provisioned_rack_power(model: RackModel, p: float) -> RackPower:
    """Planning budget q_k(p) = global_derate * AC, plus the nameplate max AC."""
    return RackPower(model.global_derate * rack_ac_power(model, p), max_ac_power(model))


def fixed_power_per_gpu(model: RackModel) -> float:
    """P_fix / n_r: the p-independent part of derated DC power, per GPU."""
    return rack_dc_power(model, 0.0) / model.gpu_count_per_rack


def network_power_per_gpu(net: NetworkPowerModel, gpus_per_two_racks: Optional[int] = None) -> float:
    gpus = net.gpus_per_two_racks if gpus_per_two_racks is None else gpus_per_two_racks
    if gpus <= 0:
        raise ConfigurationError("gpus_per_two_racks must be positive")
    return net.power_per_two_racks / gpus


def g_of_p(model: RackModel, net: Optional[NetworkPowerModel], p: float,
           p_fix_per_gpu: Optional[float] = None) -> float:
    """Datacenter power charged per GPU slot at limit ``p``.

    ``net=None`` drops the network term (used when network power is booked
    as a budget share instead of per GPU).
    """
    delta = model.global_derate
    if delta <= 0:
        raise ZeroDivisionError("global_derate must be positive")
    fix = fixed_power_per_gpu(model) if p_fix_per_gpu is None else p_fix_per_gpu
    p_net = 0.0 if net is None else network_power_per_gpu(net)
    return (p + fix + p_net) / delta


def breakdown(model: RackModel, p: float) -> list[dict]:
    """Component table rows plus totals, for report emission."""
    rows = []
    for c in model.components:
        unit = p if c.name == model.gpu_component else c.unit_power
        rows.append({
            "name": c.name,
            "power_w": unit,
            "count": c.count,
            "derate_pct": round(100 * c.derate, 3),
            "total_w": unit * c.count * c.derate,
            "scope": c.scope,
        })
    tdp = model.gpu_tdp
    rows.append({"name": "VR Loss", "total_w": _loss_term(model, model.losses.vr, tdp)})
    rows.append({"name": "Fans", "total_w": _loss_term(model, model.losses.fans, tdp)})
    rows.append({"name": "PSU loss", "total_w": psu_loss_watts(model, p)})
    rp = provisioned_rack_power(model, p)
    dc = rack_dc_power(model, p)
    rows += [
        {"name": "Total DC", "total_w": dc},
        {"name": "Total AC", "total_w": rack_ac_power(model, p)},
        {"name": "Provisioned Power", "total_w": rp.provisioned},
        {"name": "Max AC", "total_w": rp.max_ac},
        {"name": "AALC Power", "total_w": model.aalc_fraction * dc},
    ]
    return rows
