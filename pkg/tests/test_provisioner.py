import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

sys.path.insert(0, str(Path(__file__).parent))
from oracles import brute_force_hier, tree_loads  # noqa: E402

from clusterpower.hierarchy import Level, PowerNode, RackAssignment, RackType
from clusterpower.powerperf import CurveSet, default_curves, f_eval
from clusterpower.provisioner import (
    InfeasibleError,
    ProvisionInputs,
    ScenarioColumn,
    compare_scenarios,
    evaluate_column,
    n_of_p,
    per_gpu_power,
    power_ledger,
    solve_hierarchical,
    solve_relaxed,
    reference_columns,
    throughput,
)
from clusterpower.rackmodel import backend_network, catalina_gb200, provisioned_rack_power

MODEL = catalina_gb200()
CURVES = default_curves()
NET = backend_network()


def q(p):
    return provisioned_rack_power(MODEL, p).provisioned


def gpu_rack(rid):
    return RackAssignment(rid, RackType.GPU_COMPUTE, q(1200.0), 36)


class TestLedger:
    def test_order_and_sum(self):
        led = power_ledger(ProvisionInputs())
        assert sum(led.values()) == pytest.approx(150e6)
        usable = 140e6 * 1.08
        assert led["network"] == pytest.approx(0.08 * usable)
        pool = usable * 0.92
        assert led["support_services"] == pytest.approx(0.10 * pool)
        assert led["racks"] == pytest.approx(pool * 0.87)

    def test_overheads_consume_budget(self):
        with pytest.raises(InfeasibleError):
            power_ledger(ProvisionInputs(dc_power=5e6, turnup_reserve=5e6))

    @pytest.mark.parametrize("kw", [dict(dc_power=0), dict(p_min=1200, p_max=900), dict(support_fraction=1.0)])
    def test_invalid_inputs(self, kw):
        with pytest.raises(ValueError):
            ProvisionInputs(**kw)


class TestGpuCount:
    def test_960(self):
        i = ProvisionInputs()
        assert n_of_p(i, per_gpu_power(i, MODEL, NET, 960.0)) == pytest.approx(86_000, rel=0.02)

    def test_1200(self):
        i = ProvisionInputs()
        assert n_of_p(i, per_gpu_power(i, MODEL, NET, 1200.0)) == pytest.approx(74_000, rel=0.02)

    def test_n_max_clamp(self):
        g = 1000.0
        i = ProvisionInputs(dc_power=10 * g, turnup_reserve=0, it_oversubscription=0, network_fraction=0,
                            support_fraction=0, aalc_fraction=0, n_max=5)
        assert n_of_p(i, g) == 5
        assert n_of_p(replace(i, n_max=None), g) == 10

    def test_nonpositive_g(self):
        with pytest.raises(ValueError):
            n_of_p(ProvisionInputs(), 0.0)


class TestThroughput:
    def test_ratios(self):
        i = ProvisionInputs()
        assert throughput(i, CURVES, MODEL, NET, 1000.0) == pytest.approx(1.09, abs=0.02)
        assert throughput(i, CURVES, MODEL, NET, 900.0) == pytest.approx(1.06, abs=0.02)
        assert throughput(i, CURVES, MODEL, NET, 1200.0) == 1.0

    def test_clamped_regime(self):
        i = ProvisionInputs(n_max=1000)
        for p in (900.0, 1000.0, 1100.0):
            assert throughput(i, CURVES, MODEL, NET, p) == pytest.approx(f_eval(CURVES, p))

    def test_n_max_one_uses_p_max(self):
        r = solve_relaxed(ProvisionInputs(n_max=1), CURVES, MODEL, NET)
        assert r.p_star == 1200.0
        assert (r.n_gpus, r.rack_count) == (1, 1)
        assert r.power_ledger["racks"] == pytest.approx(provisioned_rack_power(MODEL, 1200.0).provisioned / 36)

    def test_n_max_binding(self):
        r = solve_relaxed(ProvisionInputs(n_max=50_000), CURVES, MODEL, NET)
        assert r.p_star == 1200.0


class TestRelaxed:
    def test_default_optimum(self):
        r = solve_relaxed(ProvisionInputs(), CURVES, MODEL, NET)
        assert 940 <= r.p_star <= 1000
        assert r.n_gpus == r.rack_count * 36
        assert sum(r.power_ledger.values()) <= 150e6 + 1e-3
        assert r.power_ledger["unallocated"] >= 0

    def test_scan_oracle(self):
        i = ProvisionInputs()
        r = solve_relaxed(i, CURVES, MODEL, NET)
        scan = max(throughput(i, CURVES, MODEL, NET, float(p)) for p in np.arange(900, 1201, 10))
        assert throughput(i, CURVES, MODEL, NET, r.p_star) >= scan - 1e-12

    def test_per_gpu_network_mode(self):
        i = ProvisionInputs(network_fraction=None)
        r = solve_relaxed(i, CURVES, MODEL, NET)
        assert 940 <= r.p_star <= 1000
        assert r.power_ledger["network"] > 0


class TestComparison:
    def test_ratio_is_division(self):
        cols = reference_columns()
        rows = compare_scenarios(cols, reference="H100 (700W)")
        singles = [evaluate_column(c) for c in cols]
        for r, s in zip(rows, singles):
            assert r["aggregate_perf_norm"] == pytest.approx(s["aggregate_perf"] / singles[0]["aggregate_perf"])

    def test_paper_column(self):
        rows = {r["label"]: r for r in compare_scenarios(reference_columns())}
        gb = rows["GB200 (960W)"]
        assert gb["gpus"] == pytest.approx(86_000, rel=0.02)
        assert gb["aggregate_perf_norm"] == pytest.approx(1.9, rel=0.05)
        gap = gb["aggregate_perf"] / rows["GB200 (1200W)"]["aggregate_perf"] - 1
        assert gap == pytest.approx(0.11, abs=0.03)

    def test_column_needs_power(self):
        with pytest.raises(ValueError):
            evaluate_column(ScenarioColumn("x", ProvisionInputs(), 960.0, 36, 1.0))


class TestHierarchical:
    def test_symmetric_rpp(self):
        racks = [gpu_rack(f"k{i}") for i in range(4)]
        rpp = PowerNode("r", Level.RPP, 4 * q(960.0) + 1e-6, racks)
        h = solve_hierarchical(rpp, CURVES, MODEL)
        assert set(h.per_rack_limits.values()) == {960.0}
        assert h.binding_constraints == ["r"]

    def test_unconstrained(self):
        rpp = PowerNode("r", Level.RPP, 1e6, [gpu_rack("a")])
        assert solve_hierarchical(rpp, CURVES, MODEL).per_rack_limits == {"a": 1200.0}

    def test_constrained_msb_does_not_touch_sibling(self):
        def msb(mid, cap):
            rp = PowerNode(f"{mid}r", Level.RPP, 1e6, [gpu_rack(f"{mid}a"), gpu_rack(f"{mid}b")])
            return PowerNode(mid, Level.MSB, cap, [PowerNode(f"{mid}s", Level.SB, 1e6, [rp])])
        tight = msb("m0", 2 * q(1000.0) + 1.0)
        loose = msb("m1", 3e6)
        h = solve_hierarchical([tight, loose], CURVES, MODEL)
        assert h.per_rack_limits["m0a"] == h.per_rack_limits["m0b"] == 1000.0
        assert h.per_rack_limits["m1a"] == h.per_rack_limits["m1b"] == 1200.0

    def test_infeasible_names_nodes(self):
        rpp = PowerNode("tiny", Level.RPP, 1000.0, [gpu_rack("a")])
        with pytest.raises(InfeasibleError) as ei:
            solve_hierarchical(rpp, CURVES, MODEL)
        assert ei.value.nodes == ["tiny"]

    def test_rejects_convex_f(self):
        convex = CurveSet(((900, 0.5), (1000, 0.55), (1200, 1.0)), ((900, 1), (1200, 1)))
        with pytest.raises(ValueError, match="concave"):
            solve_hierarchical(PowerNode("r", Level.RPP, 1e6, [gpu_rack("a")]), convex, MODEL)

    def test_water_fill_keeps_held_down_rack(self):
        # k1's own RPP holds it at 920 W; the SB cut should come out of k0 alone.
        r0 = PowerNode("r0", Level.RPP, 1e6, [gpu_rack("k0")])
        r1 = PowerNode("r1", Level.RPP, q(920.0) + 1.0, [gpu_rack("k1")])
        sb = PowerNode("s", Level.SB, q(920.0) + q(1050.0) + 1.0, [r0, r1])
        for method in ("exact", "even"):
            h = solve_hierarchical(sb, CURVES, MODEL, method=method)
            assert h.per_rack_limits == {"k0": 1050.0, "k1": 920.0}

    def test_unknown_method(self):
        with pytest.raises(ValueError, match="method"):
            solve_hierarchical(PowerNode("r", Level.RPP, 1e6, [gpu_rack("a")]), CURVES, MODEL, method="milp")

    @staticmethod
    def _two_sb_tree(r0_cap):
        # minimal case where even reduction loses objective as r0's rating rises
        r0 = PowerNode("r0", Level.RPP, r0_cap, [gpu_rack(f"k{i}") for i in range(2)])
        r1 = PowerNode("r1", Level.RPP, 150_077.0761875, [gpu_rack(f"k{i}") for i in range(2, 5)])
        return PowerNode("m", Level.MSB, 247_252.76973632807, [
            PowerNode("s0", Level.SB, 97_985.35689550781, [r0]),
            PowerNode("s1", Level.SB, 175_824.19181249998, [r1])])

    def test_even_reduction_not_monotone_exact_is(self):
        low, high = 96_618.435375, 96_618.435375 * 1.25
        even = [solve_hierarchical(self._two_sb_tree(c), CURVES, MODEL, method="even").objective for c in (low, high)]
        exact = [solve_hierarchical(self._two_sb_tree(c), CURVES, MODEL).objective for c in (low, high)]
        assert even[1] < even[0]
        assert exact[1] >= exact[0]
        assert all(x >= e - 1e-9 for x, e in zip(exact, even))


@st.composite
def tiny_trees(draw):
    """1 MSB, 1-2 SBs, RPPs of 1-3 GPU racks (6 racks at most), optional support load."""
    n_racks = draw(st.integers(1, 6))
    sizes, left = [], n_racks
    while left:
        s = draw(st.integers(1, min(3, left)))
        sizes.append(s)
        left -= s
    rpps, k = [], 0
    for j, s in enumerate(sizes):
        racks = [gpu_rack(f"k{k + i}") for i in range(s)]
        k += s
        sup = draw(st.floats(0.0, 8000.0))
        if sup > 4000:
            racks.append(RackAssignment(f"sup{j}", RackType.SUPPORT, sup))
        cap = s * q(draw(st.floats(900.0, 1250.0))) + (sup if sup > 4000 else 0.0)
        rpps.append(PowerNode(f"r{j}", Level.RPP, cap, racks))
    cut = draw(st.integers(1, len(rpps)))
    groups = [rpps[:cut], rpps[cut:]] if cut < len(rpps) else [rpps]
    sbs = []
    for i, g in enumerate(groups):
        load = sum(n.provisioned() for n in g)
        sbs.append(PowerNode(f"s{i}", Level.SB, load * draw(st.floats(0.8, 1.05)), g))
    total = sum(n.provisioned() for n in sbs)
    return PowerNode("m", Level.MSB, total * draw(st.floats(0.8, 1.05)), sbs)


def _solve_or_none(tree):
    try:
        return solve_hierarchical(tree, CURVES, MODEL)
    except InfeasibleError:
        return None


class TestHierarchicalProperties:
    @settings(max_examples=1000, deadline=None)
    @given(tiny_trees())
    def test_feasible_and_bounded(self, tree):
        h = _solve_or_none(tree)
        if h is None:
            return
        for nid, (load, cap) in tree_loads(tree, MODEL, h.per_rack_limits).items():
            assert load <= cap + 1e-6, nid
        assert all(900.0 <= p <= 1200.0 and (p - 900.0) % 10 == 0 for p in h.per_rack_limits.values())

    @settings(max_examples=1000, deadline=None)
    @given(tiny_trees())
    def test_even_within_rpp(self, tree):
        h = _solve_or_none(tree)
        if h is None:
            return
        for sb in tree.nodes:
            for rpp in sb.nodes:
                vals = {h.per_rack_limits[r.rack_id] for r in rpp.racks if r.rack_type is RackType.GPU_COMPUTE}
                assert len(vals) <= 1

    @settings(max_examples=1000, deadline=None)
    @given(tiny_trees())
    def test_exact_never_below_even(self, tree):
        h = _solve_or_none(tree)
        if h is None:
            return
        even = solve_hierarchical(tree, CURVES, MODEL, method="even")
        assert h.objective >= even.objective - 1e-9

    @settings(max_examples=1000, deadline=None)
    @given(tiny_trees(), st.floats(1.0, 1.3), st.data())
    def test_capacity_monotone(self, tree, factor, data):
        h = _solve_or_none(tree)
        if h is None:
            return
        from clusterpower.hierarchy import iter_nodes
        node = data.draw(st.sampled_from(list(iter_nodes(tree))))
        node.capacity *= factor
        h2 = solve_hierarchical(tree, CURVES, MODEL)
        assert h2.objective >= h.objective - 1e-9

    @settings(max_examples=1000, deadline=None)
    @given(tiny_trees())
    def test_oracle_gap(self, tree):
        h = _solve_or_none(tree)
        best = brute_force_hier(tree, CURVES, MODEL)
        if h is None:
            assert best == -np.inf
            return
        assert h.objective <= best + 1e-9
        assert (best - h.objective) / best <= 0.01
