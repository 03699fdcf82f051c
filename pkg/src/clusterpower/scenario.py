"""Scenario files: one YAML document drives provisioning, validation and simulation.

The loader merges the document over the defaults, rejects unknown keys and
returns a canonical nested dict; ``dump_scenario`` writes it back so that
load -> dump -> load is the identity.  Builders turn sections into model
objects.  An optional ``phases`` section holds per-phase overlays that are
deep-merged over the base document.
"""

from __future__ import annotations

import copy
import hashlib
from dataclasses import MISSING, fields
from pathlib import Path
from typing import Any, Optional, Union

import yaml

from .dimmer import DimmerConfig
from .hierarchy import Level, PowerNode, RackAssignment, RackType, synthetic_placement
from .powerperf import CurveSet, default_curves
from .provisioner import ProvisionInputs
from .rackmodel import (
    ComponentSpec,
    LossChain,
    LossRule,
    NetworkPowerModel,
    RackModel,
    backend_network,
    catalina_gb200,
    provisioned_rack_power,
)
from .simengine.breaker import TripCurve
from .simengine.engine import LimitEvent, Outage, SimScenario, Surge
from .simengine.latency import LatencyModel
from .simengine.mechanical import MechanicalProfile
from .simengine.scenarios import HOSTS_PER_RACK, PHASE_RACKS, PHASE_TDP, _job_sizes, build_cluster
from .simengine.smoother import SmootherConfig
from .simengine.traces import JobSpec, Phase
from .telemetry import DcimMeterModel, PsuMeterModel

SCHEMA = "clusterpower/scenario-v1"

SECTIONS = ("hierarchy", "rack_models", "curves", "network", "provision_inputs", "telemetry",
            "dimmer", "jobs", "smoother", "breakers", "mechanical", "seeds", "simulation", "phases")


class ScenarioError(ValueError):
    """Malformed or inconsistent scenario document."""


def _fields(cls, drop=()) -> dict:
    out = {}
    for f in fields(cls):
        if f.name in drop:
            continue
        v = f.default if f.default is not MISSING else f.default_factory()  # type: ignore[misc]
        out[f.name] = _plain(v)
    return out


def _plain(v):
    if isinstance(v, (tuple, list)):
        return [_plain(x) for x in v]
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (Level, RackType)):
        return v.value
    if hasattr(v, "item") and not isinstance(v, (str, bytes)):
        return v.item()
    return v


def _rack_model_section(model: RackModel) -> dict:
    return {
        "name": model.name,
        "gpu_component": model.gpu_component,
        "gpu_count_per_rack": model.gpu_count_per_rack,
        "global_derate": model.global_derate,
        "aalc_fraction": model.aalc_fraction,
        "gpu_tdp": model.gpu_tdp,
        "components": [[c.name, c.unit_power, c.count, c.derate, c.scope] for c in model.components],
        "losses": {
            "vr": [model.losses.vr.fraction, list(model.losses.vr.components)],
            "fans": [model.losses.fans.fraction, list(model.losses.fans.components)],
            "psu_loss": model.losses.psu_loss,
            "ac_dc_loss": model.losses.ac_dc_loss,
        },
    }


def _curves_section(c: CurveSet) -> dict:
    return {"label": c.label, "f": _plain(c.f_anchors), "hbm": _plain(c.hbm_anchors), "gemm": _plain(c.gemm_anchors)}


def default_scenario() -> dict:
    """Canonical default document: the desk-scale cluster run at the 960 W plan."""
    return {
        "schema": SCHEMA,
        "label": "default",
        "hierarchy": {
            "builder": "phase_cluster",
            "params": {"racks": PHASE_RACKS["c"], "msbs": 4, "plan_tdp": 960.0, "racks_per_rpp": 3,
                       "rpps_per_sb": 6, "support_per_rpp": 0.0},
            "nodes": [],
        },
        "rack_models": _rack_model_section(catalina_gb200()),
        "curves": _curves_section(default_curves()),
        "network": {"tiers": _plain(backend_network().switch_tiers), "gpus_per_two_racks": 72},
        "provision_inputs": _fields(ProvisionInputs),
        "telemetry": {
            "psu": _fields(PsuMeterModel),
            "dcim": _fields(DcimMeterModel),
            "rack_budget": 49_600.0,
            "stat": "p70",
            "hosts_per_rack": HOSTS_PER_RACK,
            "duration": 3600.0,
            "dt": 0.01,
            "load_percentile": 90,
            "selection_seeds": 4,
            "selection_tdp": 1020.0,
            "headroom": {"source": "placement", "n_msb": 54, "seed": 0},
        },
        "dimmer": {**_fields(DimmerConfig, drop=("rated_capacity", "base_tdp")),
                   "enabled": True, "levels": ["RPP", "SB", "MSB"]},
        "jobs": {"builder": "rack_mix", "mix": [16, 12, 8, 6, 4, 2, 1, 1], "groups": [], "explicit": []},
        "smoother": _fields(SmootherConfig),
        "breakers": {"RPP": [[1.10, 1020.0], [1.40, 60.0]],
                     "SB": [[1.10, 600.0], [1.40, 45.0]],
                     "MSB": [[1.15, 60.0], [1.20, 45.0], [2.0, 30.0]]},
        "mechanical": {**_fields(MechanicalProfile), "enabled": True, "start_hour": 12.0},
        "seeds": {"provision": 0, "telemetry": 0, "simulate": 0},
        "simulation": {
            "duration": 3600, "base_tdp": PHASE_TDP["c"], "non_gpu_utilization": 0.8,
            "latency": _fields(LatencyModel), "limit_events": [], "surges": [], "outages": [],
        },
        "phases": {
            "a": {"hierarchy": {"params": {"racks": PHASE_RACKS["a"], "plan_tdp": 1200.0}},
                  "simulation": {"base_tdp": PHASE_TDP["a"]}, "dimmer": {"enabled": False}},
            "b": {"simulation": {"base_tdp": PHASE_TDP["b"]}, "dimmer": {"enabled": False}},
            "c": {"simulation": {"base_tdp": PHASE_TDP["c"]}, "dimmer": {"enabled": False}},
            "d": {"simulation": {"base_tdp": PHASE_TDP["d"]}, "dimmer": {"enabled": True}},
        },
    }


def case_study_document() -> dict:
    """Single over-limited RPP with a surging high-priority job."""
    doc = default_scenario()
    rack_q = provisioned_rack_power(catalina_gb200(1020.0), 1020.0).provisioned
    racks = [{"rack_id": f"k{i}", "rack_type": "gpu_compute", "provisioned_power": rack_q, "gpu_count": 36}
             for i in range(3)]
    racks.append({"rack_id": "net0", "rack_type": "network", "provisioned_power": 20_500.0, "gpu_count": 0})
    doc["label"] = "case_study"
    doc["hierarchy"] = {"builder": "explicit", "params": {}, "nodes": [
        {"id": "msb0", "level": "MSB", "capacity": 3.0e6, "mechanical_plan": 3.0e5, "children": [
            {"id": "sb0", "level": "SB", "capacity": 1.25e6, "children": [
                {"id": "rpp0", "level": "RPP", "capacity": 197_500.0, "children": racks}]}]}]}
    doc["jobs"] = {"builder": "rack_groups", "mix": [], "explicit": [], "groups": [
        {"job_id": "low", "racks": ["k0", "k1"], "priority": 0},
        {"job_id": "high", "racks": ["k2"], "priority": 1}]}
    doc["dimmer"]["levels"] = ["RPP"]
    doc["mechanical"]["enabled"] = False
    doc["simulation"].update(duration=900, base_tdp=1020.0,
                             limit_events=[{"t_start": 120.0, "t_end": 300.0, "device_id": "rpp0", "factor": 0.78}],
                             surges=[{"t_start": 150.0, "t_end": 210.0, "job_id": "high", "level": 1.0}])
    doc["phases"] = {}
    return doc


# --- validation -------------------------------------------------------------

# Sections whose mapping keys are user-chosen rather than fixed.
_OPEN = {("hierarchy", "params"), ("telemetry", "headroom"), ("breakers",), ("phases",)}
# Keys holding free-form lists.
_LISTS = {"nodes", "groups", "explicit", "mix", "components", "f", "hbm", "gemm", "tiers", "levels",
          "limit_events", "surges", "outages", "shape", "vr", "fans", "RPP", "SB", "MSB"}


def _merge(defaults: dict, given: dict, path: tuple) -> dict:
    if not isinstance(given, dict):
        raise ScenarioError(f"{'.'.join(path) or 'document'}: expected a mapping")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        here = path + (str(k),)
        if path in _OPEN or (path and path[:1] == ("phases",)):
            out[k] = copy.deepcopy(v)
            continue
        if k not in defaults:
            raise ScenarioError(f"unknown key {'.'.join(here)}")
        d = defaults[k]
        if isinstance(d, dict) and here not in _OPEN and k not in _LISTS:
            out[k] = _merge(d, v if v is not None else {}, here)
        elif here in _OPEN:
            if not isinstance(v, dict):
                raise ScenarioError(f"{'.'.join(here)}: expected a mapping")
            out[k] = copy.deepcopy(v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _deep_update(base: dict, overlay: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in overlay.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_update(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_scenario(data: Any) -> dict:
    """Validate a parsed document; returns the canonical form."""
    if not isinstance(data, dict):
        raise ScenarioError("scenario must be a mapping")
    if data.get("schema") != SCHEMA:
        raise ScenarioError(f"schema must be {SCHEMA!r}, got {data.get('schema')!r}")
    doc = _plain(_merge(default_scenario() | {"phases": {}}, data, ()))
    for name, overlay in doc["phases"].items():
        if not isinstance(overlay, dict):
            raise ScenarioError(f"phases.{name}: expected a mapping")
        if "phases" in overlay or "schema" in overlay:
            raise ScenarioError(f"phases.{name}: overlays cannot nest phases or change the schema")
        _merge(default_scenario() | {"phases": {}}, _deep_update({k: v for k, v in doc.items() if k != "phases"},
                                                                  overlay), ())
    try:
        build_all(doc)
        for name in doc["phases"]:
            build_all(apply_phase(doc, name))
    except ScenarioError:
        raise
    except (ValueError, KeyError, TypeError, IndexError) as exc:
        raise ScenarioError(f"inconsistent scenario: {exc}") from exc
    return doc


def load_scenario(source: Union[str, Path, None] = None) -> dict:
    """Load from a path (or the built-in default when ``None``)."""
    if source is None:
        return parse_scenario(default_scenario())
    try:
        data = parse_yaml(Path(source).read_text())
    except yaml.YAMLError as exc:
        raise ScenarioError(f"{source}: YAML error: {exc}") from exc
    except OSError as exc:
        raise ScenarioError(f"{source}: {exc}") from exc
    return parse_scenario(data)


# libyaml bindings when present; same output, much faster on large documents
_Loader = getattr(yaml, "CSafeLoader", yaml.SafeLoader)
_Dumper = getattr(yaml, "CSafeDumper", yaml.SafeDumper)


def parse_yaml(text: str):
    return yaml.load(text, Loader=_Loader)


def dump_scenario(doc: dict) -> str:
    return yaml.dump(doc, Dumper=_Dumper, sort_keys=True, default_flow_style=None, width=100)


def scenario_hash(doc: dict) -> str:
    return hashlib.sha256(dump_scenario(doc).encode()).hexdigest()


def apply_phase(doc: dict, phase: Optional[str]) -> dict:
    if phase is None:
        return doc
    if phase not in doc["phases"]:
        raise ScenarioError(f"unknown phase {phase!r}; scenario defines {sorted(doc['phases'])}")
    base = {k: v for k, v in doc.items() if k != "phases"}
    out = _deep_update(base, doc["phases"][phase])
    out["phases"] = {}
    out["label"] = f"{doc['label']}:{phase}"
    return out


# --- builders ---------------------------------------------------------------


def build_rack_model(doc: dict) -> RackModel:
    s = doc["rack_models"]
    comps = tuple(ComponentSpec(n, float(w), float(c), float(d), sc) for n, w, c, d, sc in s["components"])
    lo = s["losses"]
    losses = LossChain(LossRule(float(lo["vr"][0]), tuple(lo["vr"][1])),
                       LossRule(float(lo["fans"][0]), tuple(lo["fans"][1])),
                       float(lo["psu_loss"]), float(lo["ac_dc_loss"]))
    model = RackModel(comps, losses, int(s["gpu_count_per_rack"]), s["gpu_component"], float(s["global_derate"]),
                      float(s["aalc_fraction"]), float(s["gpu_tdp"]), s["name"])
    model.gpu  # unknown gpu_component surfaces here
    return model


def build_curves(doc: dict) -> CurveSet:
    c = doc["curves"]
    gemm = tuple((float(ai), tuple(map(tuple, tbl))) for ai, tbl in c["gemm"])
    return CurveSet(tuple(map(tuple, c["f"])), tuple(map(tuple, c["hbm"])), gemm, c["label"])


def build_network(doc: dict) -> NetworkPowerModel:
    n = doc["network"]
    return NetworkPowerModel(tuple((str(a), float(b), float(c)) for a, b, c in n["tiers"]), int(n["gpus_per_two_racks"]))


def build_inputs(doc: dict) -> ProvisionInputs:
    return ProvisionInputs(**doc["provision_inputs"])


def _node_from(d: dict) -> PowerNode:
    kids = []
    for c in d.get("children", []):
        if "level" in c:
            kids.append(_node_from(c))
        else:
            extra = set(c) - {"rack_id", "rack_type", "provisioned_power", "gpu_count", "priority"}
            if extra:
                raise ScenarioError(f"rack {c.get('rack_id')}: unknown keys {sorted(extra)}")
            kids.append(RackAssignment(c["rack_id"], c["rack_type"], float(c["provisioned_power"]),
                                       int(c.get("gpu_count", 0)), int(c.get("priority", 0))))
    extra = set(d) - {"id", "level", "capacity", "children", "mechanical_plan"}
    if extra:
        raise ScenarioError(f"node {d.get('id')}: unknown keys {sorted(extra)}")
    return PowerNode(d["id"], d["level"], float(d["capacity"]), kids, float(d.get("mechanical_plan", 0.0)))


def build_hierarchy(doc: dict) -> list[PowerNode]:
    h = doc["hierarchy"]
    p = h["params"]
    if h["builder"] == "explicit":
        if not h["nodes"]:
            raise ScenarioError("hierarchy.nodes is empty for the explicit builder")
        return [_node_from(n) for n in h["nodes"]]
    if h["builder"] == "phase_cluster":
        model = build_rack_model(doc)
        n, m = int(p["racks"]), int(p["msbs"])
        per = [n // m + (1 if i < n % m else 0) for i in range(m)]
        q = provisioned_rack_power(model, float(p["plan_tdp"])).provisioned
        hier, _ = build_cluster(per, q, int(p["racks_per_rpp"]), int(p["rpps_per_sb"]), float(p["support_per_rpp"]),
                                mech_plan=float(doc["mechanical"]["plan_w"]))
        return hier
    if h["builder"] == "placement":
        return synthetic_placement(**p)
    raise ScenarioError(f"unknown hierarchy builder {h['builder']!r}")


def _gpu_racks(hier) -> list[tuple[str, str, int]]:
    """(rack_id, rpp_id, gpu_count) in tree order."""
    out = []

    def visit(n: PowerNode):
        for c in n.children:
            if isinstance(c, PowerNode):
                visit(c)
            elif c.rack_type is RackType.GPU_COMPUTE:
                out.append((c.rack_id, n.id, c.gpu_count))

    for root in hier:
        visit(root)
    return out


def _rack_hosts(rack_id: str, rpp: str, gpus: int, gpus_per_host: int) -> list[tuple[str, str]]:
    return [(f"{rack_id}-h{i:02d}", rpp) for i in range(gpus // gpus_per_host)]


def build_jobs(doc: dict, hier) -> list[JobSpec]:
    j = doc["jobs"]
    gph = 2
    if j["builder"] == "none":
        return []
    if j["builder"] == "explicit":
        jobs = []
        for e in j["explicit"]:
            e = dict(e)
            prof = e.pop("phase_profile", None)
            if prof is not None:
                e["phase_profile"] = tuple(Phase(float(a), str(b), float(c)) for a, b, c in prof)
            e["hosts"] = tuple(tuple(h) for h in e["hosts"])
            jobs.append(JobSpec(**e))
        return jobs
    racks = _gpu_racks(hier)
    if j["builder"] == "rack_groups":
        where = {r: (rpp, g) for r, rpp, g in racks}
        jobs = []
        for g in j["groups"]:
            hosts = []
            for r in g["racks"]:
                if r not in where:
                    raise ScenarioError(f"job {g['job_id']}: unknown rack {r!r}")
                hosts += _rack_hosts(r, where[r][0], where[r][1], gph)
            jobs.append(JobSpec(g["job_id"], tuple(hosts), gph, priority=int(g.get("priority", 0))))
        return jobs
    if j["builder"] == "rack_mix":
        jobs = []
        by_msb: dict[str, list] = {}
        for root in hier:
            ids = {r.rack_id for r in root.iter_racks()}
            by_msb[root.id] = [r for r in racks if r[0] in ids]
        mix = [int(x) for x in j["mix"]]
        for mid, rs in by_msb.items():
            if not rs:
                continue
            k = 0
            for i, size in enumerate(_job_sizes(len(rs), mix)):
                hosts = [h for r, rpp, g in rs[k:k + size] for h in _rack_hosts(r, rpp, g, gph)]
                jobs.append(JobSpec(f"{mid}j{i:02d}", tuple(hosts), gph))
                k += size
        return jobs
    raise ScenarioError(f"unknown jobs builder {j['builder']!r}")


def build_sim(doc: dict, seed: Optional[int] = None, literal: Optional[bool] = None) -> SimScenario:
    hier = build_hierarchy(doc)
    jobs = build_jobs(doc, hier)
    sim = doc["simulation"]
    base = float(sim["base_tdp"])
    d = dict(doc["dimmer"])
    enabled, levels = d.pop("enabled"), tuple(Level(x) for x in d.pop("levels"))
    if literal is not None:
        d["literal"] = literal
    d["min_tdp"] = min(float(d["min_tdp"]), base)
    d["safe_tdp"] = min(float(d["safe_tdp"]), base)
    dimmer = DimmerConfig(base_tdp=base, **d) if enabled else None
    mech = dict(doc["mechanical"])
    mech_on = mech.pop("enabled")
    start_hour = float(mech.pop("start_hour"))
    mech["shape"] = tuple(tuple(x) for x in mech["shape"])
    breakers = {Level(k): TripCurve(tuple(map(tuple, v)), k) for k, v in doc["breakers"].items()}
    return SimScenario(
        hierarchy=hier, jobs=jobs, base_tdp=base, curves=build_curves(doc),
        smoother=SmootherConfig(**doc["smoother"]), dimmer=dimmer, dimmer_levels=levels, breakers=breakers,
        mechanical=MechanicalProfile(**mech) if mech_on else None, mechanical_start_hour=start_hour,
        latency=LatencyModel(**sim["latency"]), duration=int(sim["duration"]),
        seed=int(doc["seeds"]["simulate"] if seed is None else seed),
        limit_events=tuple(LimitEvent(**e) for e in sim["limit_events"]),
        surges=tuple(Surge(**e) for e in sim["surges"]),
        outages=tuple(Outage(**e) for e in sim["outages"]),
        non_gpu_utilization=float(sim["non_gpu_utilization"]), label=doc["label"],
    )


def build_meters(doc: dict) -> tuple[PsuMeterModel, DcimMeterModel]:
    t = doc["telemetry"]
    return PsuMeterModel(**t["psu"]), DcimMeterModel(**t["dcim"])


def build_all(doc: dict) -> None:
    """Construct every model once so cross-references fail at load time."""
    build_rack_model(doc)
    build_curves(doc)
    build_network(doc)
    build_inputs(doc)
    build_meters(doc)
    if doc["telemetry"]["stat"] not in ("max", "p90", "p80", "p70", "p60", "p50", "mean"):
        raise ScenarioError(f"telemetry.stat {doc['telemetry']['stat']!r} is not an aggregation statistic")
    from .simengine.engine import _Layout

    _Layout(build_sim(doc))
