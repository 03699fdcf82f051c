"""Command line: provision, validate-tdp, simulate, report.

Every command reads one scenario file (``--scenario``; the built-in default
when omitted), writes CSV/JSON into ``--out`` and a ``manifest.json`` listing
the outputs.  Set ``CLUSTERPOWER_LOG`` (e.g. ``INFO``) for log verbosity.

Exit codes: 0 ok, 2 scenario/argument error, 3 infeasible plan, 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .hierarchy import Level, headroom_cdf, planned_headroom, synthetic_placement
from .powerperf import GRID_W, eta_eval, f_eval
from .provisioner import (
    InfeasibleError,
    ProvisionInputs,
    ScenarioColumn,
    compare_scenarios,
    n_of_p,
    per_gpu_power,
    solve_relaxed,
    reference_columns,
    throughput,
)
from .rackmodel import breakdown, provisioned_rack_power
from .scenario import (
    ScenarioError,
    apply_phase,
    build_curves,
    build_hierarchy,
    build_inputs,
    build_meters,
    build_network,
    build_rack_model,
    build_sim,
    dump_scenario,
    load_scenario,
    scenario_hash,
)
from .simengine.engine import _f_vec, run_simulation
from .telemetry import STATS, aggregator_study, calibrated_rack_generator, validate_tdp_uplift

log = logging.getLogger("clusterpower")

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_INFEASIBLE = 3
EXIT_RUNTIME = 4

LOG_ENV = "CLUSTERPOWER_LOG"


class _ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_PARSE, f"{self.prog}: error: {message}\n")


def _write_csv(path: Path, header: Sequence[str], rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow(r)
    return path


def _write_json(path: Path, obj) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


class Run:
    """Output directory plus the manifest being assembled."""

    def __init__(self, out: Path, command: str, doc: dict, seed: Optional[int], phase: Optional[str] = None,
                 base: Optional[dict] = None):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.outputs: list[str] = []
        self.manifest = {
            "command": command,
            "scenario_hash": scenario_hash(doc),
            "base_scenario_hash": scenario_hash(base if base is not None else doc),
            "scenario_label": doc["label"],
            "seed": seed,
            "phase": phase,
            "tool_version": __version__,
        }
        self.add("scenario.yaml", lambda p: p.write_text(dump_scenario(doc)))

    def add(self, name: str, writer) -> Path:
        path = self.out / name
        writer(path)
        self.outputs.append(name)
        return path

    def csv(self, name, header, rows) -> Path:
        return self.add(name, lambda p: _write_csv(p, header, rows))

    def json(self, name, obj) -> Path:
        return self.add(name, lambda p: _write_json(p, obj))

    def finish(self, status: str = "ok", **extra) -> None:
        self.manifest.update(extra, status=status, outputs=sorted(self.outputs + ["manifest.json"]))
        _write_json(self.out / "manifest.json", self.manifest)


# --- provision --------------------------------------------------------------


def _net_for(inputs: ProvisionInputs, ntw):
    return ntw if inputs.network_fraction is None else None


def cmd_provision(args) -> int:
    doc = load_scenario(args.scenario)
    run = Run(args.out, "provision", doc, doc["seeds"]["provision"])
    inputs, curves, model, ntw = build_inputs(doc), build_curves(doc), build_rack_model(doc), build_network(doc)
    try:
        res = solve_relaxed(inputs, curves, model, ntw)
    except InfeasibleError as exc:
        run.json("infeasible.json", {"error": str(exc), "nodes": list(getattr(exc, "nodes", []))})
        run.finish("infeasible")
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    run.csv("ledger.csv", ["category", "watts"], [(k, _fmt(v)) for k, v in res.power_ledger.items()])
    net = _net_for(inputs, ntw)
    lo, hi = inputs.p_min, inputs.p_max
    rows = []
    for p in np.arange(lo, hi + 1e-9, GRID_W).tolist():
        e = eta_eval(curves, model, net, p)
        g = per_gpu_power(inputs, model, ntw, p)
        rows.append((p, _fmt(e.f), _fmt(e.g), _fmt(e.eta), _fmt(g), n_of_p(inputs, g),
                     _fmt(throughput(inputs, curves, model, ntw, p))))
    run.csv("eta_grid.csv", ["p_w", "f", "g_w", "eta", "per_gpu_w", "n_gpus", "throughput_norm"], rows)
    run.csv("rack_breakdown.csv", ["name", "total_w"],
            [(r["name"], _fmt(r["total_w"])) for r in breakdown(model, res.p_star)])

    # The 960 W and p_max columns carry measured per-GPU figures (H100 units);
    # the optimum column scales the p_max figure by the performance curve.
    cols = [c for c in reference_columns(model) if c.label.startswith("H100")]
    sources = ["measured", "measured", "measured"]
    cols.append(ScenarioColumn(f"{inputs.label} ({args.plan_p:g}W)", inputs, float(args.plan_p),
                               model.gpu_count_per_rack, args.plan_perf, model=model))
    cols.append(ScenarioColumn(f"{inputs.label} ({inputs.p_max:g}W)", inputs, inputs.p_max,
                               model.gpu_count_per_rack, args.peak_perf, model=model))
    if res.p_star not in (float(args.plan_p), inputs.p_max):
        perf = args.peak_perf * f_eval(curves, res.p_star) / f_eval(curves, inputs.p_max)
        cols.append(ScenarioColumn(f"{inputs.label} ({res.p_star:g}W)", inputs, res.p_star,
                                   model.gpu_count_per_rack, perf, model=model))
        sources.append("curve")
    table = compare_scenarios(cols, reference=cols[0].label, net=net)
    for r, src in zip(table, sources):
        r["perf_source"] = src
    keys = list(table[0].keys())
    run.csv("comparison.csv", keys, [[_fmt(r[k]) for k in keys] for r in table])
    op = {
        "p_star_w": res.p_star, "n_gpus": res.n_gpus, "rack_count": res.rack_count,
        "per_gpu_perf": res.per_gpu_perf, "throughput": res.throughput, "eta": res.eta,
        "eta_unimodal": res.unimodal, "label": res.label,
        "rack_provisioned_w": provisioned_rack_power(model, res.p_star).provisioned,
    }
    run.json("operating_point.json", op)
    run.finish()
    print(f"p* = {res.p_star:g} W, {res.n_gpus} GPUs in {res.rack_count} racks")
    for r in table:
        print(f"  {r['label']:>16}: {r['gpus']:>7} GPUs  aggregate {r['aggregate_perf_norm']:.3f}x")
    return EXIT_OK


# --- validate-tdp -----------------------------------------------------------


def cmd_validate_tdp(args) -> int:
    doc = load_scenario(args.scenario)
    seed = doc["seeds"]["telemetry"] if args.seed is None else args.seed
    run = Run(args.out, "validate-tdp", doc, seed)
    t = doc["telemetry"]
    model, curves = build_rack_model(doc), build_curves(doc)
    psu, dcim = build_meters(doc)
    gen = calibrated_rack_generator(int(t["hosts_per_rack"]), float(t["duration"]), float(t["dt"]))

    seeds = [seed + i for i in range(int(t["selection_seeds"]))]
    study = aggregator_study(gen, float(t["selection_tdp"]), seeds, psu, dcim, int(t["load_percentile"]))
    rows = [(k, _fmt(study.mean_errors[k]), _fmt(study.mean_distance[k]),
             sum(c.best == k for c in study.choices)) for k in STATS]
    run.csv("aggregator.csv", ["stat", "mean_ratio", "mean_abs_error", "seeds_best"], rows)

    up = validate_tdp_uplift(model, curves, gen, float(t["rack_budget"]), psu, seed, t["stat"])
    run.csv("uplift_sweep.csv", ["p_w", f"worst_minute_{t['stat']}_w", "fits"],
            [(p, _fmt(v), int(v <= up.rack_budget * (1 + 1e-9))) for p, v in up.stat_by_p.items()])

    h = t["headroom"]
    if h.get("source", "placement") == "placement":
        hier = synthetic_placement(**{k: v for k, v in h.items() if k != "source"})
    else:
        hier = build_hierarchy(doc)
    rep = planned_headroom(hier)
    cols = ["node_id", "level", "capacity_w", "provisioned_w", "headroom_w", "gpus", "headroom_per_gpu_w"]
    run.csv("headroom_nodes.csv", cols, [[r[c] for c in cols] for r in rep.rows])
    for lvl in (Level.MSB, Level.SB, Level.RPP):
        if rep.values(lvl):
            run.csv(f"headroom_cdf_{lvl.value.lower()}.csv", ["headroom_w", "cdf"], headroom_cdf(rep, lvl))
    if rep.values(Level.MSB):
        run.csv("headroom_cdf_msb_per_gpu.csv", ["headroom_per_gpu_w", "cdf"], headroom_cdf(rep, Level.MSB, per_gpu=True))
    result = {"p_w": up.p, "rack_budget_w": up.rack_budget, "stat": t["stat"], "feasible": up.feasible,
              "aggregator_best": study.best, "stranded_fraction": rep.stranded_fraction,
              "msb_headroom_mean_w": float(np.mean(rep.values(Level.MSB))) if rep.values(Level.MSB) else None}
    run.json("uplift.json", result)
    if not up.feasible:
        run.finish("infeasible")
        print(f"infeasible: no limit in range keeps {t['stat']} under {up.rack_budget:g} W", file=sys.stderr)
        return EXIT_INFEASIBLE
    run.finish()
    print(f"aggregator: {study.best}; validated limit {up.p:g} W ({t['stat']} <= {up.rack_budget:g} W)")
    return EXIT_OK


# --- simulate ---------------------------------------------------------------


def small_job_index(report) -> Optional[int]:
    sizes = report.job_gpus
    if not len(sizes):
        return None
    return int(min(range(len(sizes)), key=lambda j: (sizes[j], report.job_ids[j])))


def cmd_simulate(args) -> int:
    base = load_scenario(args.scenario)
    doc = apply_phase(base, args.phase)
    seed = doc["seeds"]["simulate"] if args.seed is None else args.seed
    run = Run(args.out, "simulate", doc, seed, args.phase, base=base)
    from .dimmer import write_event_log

    sc = build_sim(doc, seed=seed, literal=True if args.compat_literal_dimmer else None)
    rep = run_simulation(sc)
    T = len(rep.t)
    run.csv("throughput.csv", ["t", "throughput", "stranded_w"],
            [(int(t), _fmt(rep.throughput[i]), _fmt(rep.stranded[i])) for i, t in enumerate(rep.t)])
    run.csv("node_power.csv", ["t"] + rep.node_ids,
            [[int(rep.t[i])] + [_fmt(x) for x in rep.node_power[:, i]] for i in range(T)])
    run.csv("jobs.csv", ["t"] + [f"{j}:min_tdp_w" for j in rep.job_ids] + [f"{j}:host_w" for j in rep.job_ids],
            [[int(rep.t[i])] + [_fmt(x) for x in rep.job_min_tdp[:, i]] + [_fmt(x) for x in rep.job_host_power[:, i]]
             for i in range(T)])
    run.add("events.jsonl", lambda p: write_event_log(p, rep.events))
    keys = ["t", "device_id", "reading_w", "limit_w", "action", "server_id", "tdp_w"]
    run.csv("events.csv", keys, [[e[k] if e[k] is not None else "" for k in keys] for e in rep.events])
    run.json("trips.json", rep.trips)

    summary = dict(rep.summary)
    j = small_job_index(rep)
    mult = (1.0 - sc.smoother.overhead_fraction) if sc.smoother.enabled else 1.0
    if j is not None and T:
        perf = _f_vec(sc.curves, rep.job_min_tdp[j]) * mult
        summary.update(small_job=rep.job_ids[j], small_job_perf=float(perf.mean()))
    else:
        summary.update(small_job=None, small_job_perf=None)
    summary.update(phase=args.phase, seed=seed, literal_dimmer=bool(args.compat_literal_dimmer))
    run.json("summary.json", summary)
    run.finish(summary=summary)
    print(f"{doc['label']}: mean throughput {summary['mean_throughput']:.2f} GPU-eq, "
          f"{summary['cap_events']} caps, {summary['uncap_events']} uncaps, {summary['trips']} trips")
    return EXIT_OK


# --- report -----------------------------------------------------------------


def _read_run(d: Path) -> dict:
    man = json.loads((d / "manifest.json").read_text())
    if man.get("command") != "simulate":
        raise ScenarioError(f"{d}: not a simulate run")
    with open(d / "throughput.csv", newline="") as fh:
        tp = [float(r["throughput"]) for r in csv.DictReader(fh)]
    summary = json.loads((d / "summary.json").read_text())
    return {"dir": str(d), "manifest": man, "summary": summary,
            "mean_throughput": float(np.mean(tp)) if tp else 0.0}


def phase_table(runs: list[dict]) -> list[dict]:
    """Normalize throughput and small-job performance to the first run."""
    ref = runs[0]
    # Phase overlays change the effective scenario; runs must share the base file.
    hashes = {r["manifest"].get("base_scenario_hash", r["manifest"]["scenario_hash"]) for r in runs}
    rows = []
    for r in runs:
        sp, rp = r["summary"].get("small_job_perf"), ref["summary"].get("small_job_perf")
        rows.append({
            "run": r["manifest"].get("phase") or Path(r["dir"]).name,
            "dir": r["dir"],
            "seed": r["manifest"]["seed"],
            "mean_throughput": r["mean_throughput"],
            "relative_throughput": r["mean_throughput"] / ref["mean_throughput"] if ref["mean_throughput"] else float("nan"),
            "small_job_relative_perf": sp / rp if sp is not None and rp else None,
            "cap_events": r["summary"]["cap_events"],
            "trips": r["summary"]["trips"],
            "hash_mismatch": len(hashes) > 1,
        })
    return rows


def cmd_report(args) -> int:
    runs = [_read_run(Path(d)) for d in args.runs]
    rows = phase_table(runs)
    if rows[0]["hash_mismatch"]:
        log.warning("runs come from different scenario files; comparison flagged")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    keys = list(rows[0].keys())
    _write_csv(out / "phase_report.csv", keys, [[_fmt(r[k]) if r[k] is not None else "" for k in keys] for r in rows])
    lines = [f"{'run':>10} {'throughput':>11} {'relative':>9} {'small job':>10} {'caps':>7} {'trips':>6}"]
    for r in rows:
        sj = f"{r['small_job_relative_perf']:.3f}" if r["small_job_relative_perf"] is not None else "-"
        lines.append(f"{r['run']:>10} {r['mean_throughput']:>11.2f} {r['relative_throughput']:>9.3f} "
                     f"{sj:>10} {r['cap_events']:>7} {r['trips']:>6}")
    text = "\n".join(lines) + "\n"
    (out / "phase_report.txt").write_text(text)
    _write_json(out / "manifest.json", {"command": "report", "tool_version": __version__,
                                        "inputs": [r["dir"] for r in rows], "status": "ok",
                                        "hash_mismatch": rows[0]["hash_mismatch"],
                                        "outputs": ["manifest.json", "phase_report.csv", "phase_report.txt"]})
    print(text, end="")
    return EXIT_OK


# --- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _ArgParser(prog="clusterpower", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_ArgParser)

    def common(sp, seed=True):
        sp.add_argument("--scenario", type=Path, default=None, help="scenario YAML (default: built-in)")
        sp.add_argument("--out", type=Path, required=True, help="output directory")
        if seed:
            sp.add_argument("--seed", type=int, default=None, help="override the scenario seed")

    sp = sub.add_parser("provision", help="phase-1 plan: operating point, ledger, comparison")
    common(sp, seed=False)
    sp.add_argument("--plan-p", type=float, default=960.0, help="extra comparison column (W)")
    sp.add_argument("--plan-perf", type=float, default=2.4, help="per-GPU perf at --plan-p in H100 units")
    sp.add_argument("--peak-perf", type=float, default=2.5, help="per-GPU perf at p_max in H100 units")
    sp.set_defaults(func=cmd_provision)

    sp = sub.add_parser("validate-tdp", help="PSU aggregator choice, TDP uplift and headroom CDFs")
    common(sp)
    sp.set_defaults(func=cmd_validate_tdp)

    sp = sub.add_parser("simulate", help="operational simulation")
    common(sp)
    sp.add_argument("--phase", default=None, help="apply the named overlay from the scenario's phases")
    sp.add_argument("--compat-literal-dimmer", action="store_true",
                    help="use the pseudocode's literal dimmed-TDP lines")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("report", help="phase comparison over simulate runs")
    sp.add_argument("runs", nargs="+", type=Path, help="simulate output directories, reference first")
    sp.add_argument("--out", type=Path, required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except InfeasibleError as exc:
        print(f"infeasible: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except Exception as exc:  # noqa: BLE001
        log.exception("runtime failure")
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
