import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterpower.hierarchy import (
    EmptyDistributionError,
    HeadroomReport,
    Level,
    PowerNode,
    RackAssignment,
    RackType,
    StructureError,
    headroom_cdf,
    iter_nodes,
    planned_headroom,
    synthetic_placement,
    validate_tree,
)


def gpu(rid, w, gpus=36):
    return RackAssignment(rid, RackType.GPU_COMPUTE, w, gpus)


def rpp(rid, racks, cap=197_500.0):
    return PowerNode(rid, Level.RPP, cap, list(racks))


class TestStructure:
    def test_rpp_slack(self):
        node = rpp("r0", [gpu("a", 95_000), gpu("b", 95_000)])
        res = validate_tree(node)
        assert res.ok
        assert res.checks["r0"].slack == pytest.approx(7_500.0)

    def test_empty_node_full_headroom(self):
        rep = planned_headroom(rpp("r0", []))
        assert rep.per_node["r0"] == 197_500.0
        assert rep.per_gpu_headroom["r0"] is None

    def test_sb_flagged_rpps_not(self):
        r1 = rpp("r1", [gpu("a", 150_000)])
        r2 = rpp("r2", [gpu("b", 150_000)])
        sb = PowerNode("sb", Level.SB, 250_000.0, [r1, r2])
        res = validate_tree(sb)
        assert res.flagged == ["sb"]
        assert res.checks["sb"].excess == pytest.approx(50_000.0)

    def test_level_order_enforced(self):
        inner = PowerNode("sb", Level.SB, 1e6, [])
        bad = PowerNode("r", Level.RPP, 1e5, [inner])
        with pytest.raises(StructureError, match="sb"):
            validate_tree(bad)

    def test_rack_under_sb_rejected(self):
        bad = PowerNode("sb", Level.SB, 1e6, [gpu("x", 1.0)])
        with pytest.raises(StructureError, match="x"):
            validate_tree(bad)

    def test_rack_on_two_rpps_rejected(self):
        r = gpu("dup", 10.0)
        sb = PowerNode("sb", Level.SB, 1e6, [rpp("a", [r]), rpp("b", [r])])
        with pytest.raises(StructureError, match="dup"):
            validate_tree(sb)

    def test_shared_subtree_rejected(self):
        child = rpp("a", [])
        sb = PowerNode("sb", Level.SB, 1e6, [child, child])
        with pytest.raises(StructureError):
            validate_tree(sb)

    def test_gpu_count_iff_compute(self):
        with pytest.raises(StructureError):
            RackAssignment("s", RackType.SUPPORT, 10.0, 4)
        with pytest.raises(StructureError):
            RackAssignment("g", RackType.GPU_COMPUTE, 10.0, 0)

    def test_capacity_positive(self):
        with pytest.raises(StructureError):
            PowerNode("z", Level.RPP, 0.0)

    def test_validate_does_not_mutate(self):
        node = rpp("r0", [gpu("a", 1.0)])
        before = repr(node)
        validate_tree(node)
        assert repr(node) == before


class TestHeadroom:
    def test_msb_against_it_budget(self):
        racks = [gpu(f"k{i}", 49_600.0) for i in range(42)]
        rpps = [rpp(f"r{i}", racks[3 * i:3 * i + 3]) for i in range(14)]
        sup = rpp("rs", [RackAssignment("s", RackType.SUPPORT, 2.7e6 - 42 * 49_600.0 - 160e3)], cap=1e6)
        sb = PowerNode("sb", Level.SB, 5e6, rpps + [sup])
        msb = PowerNode("m", Level.MSB, 3e6, [sb])
        rep = planned_headroom(msb)
        assert rep.per_node["m"] == pytest.approx(160e3)
        assert rep.per_gpu_headroom["m"] == pytest.approx(160e3 / 1512)
        assert 100 < rep.per_gpu_headroom["m"] < 110

    def test_rack_at_capacity(self):
        rep = planned_headroom(rpp("r", [gpu("a", 197_500.0)]))
        assert rep.per_node["r"] == 0.0

    def test_three_node_cdf(self):
        rep = HeadroomReport({"a": 10e3, "b": 20e3, "c": 30e3}, {}, 0.0, {k: Level.RPP for k in "abc"})
        assert headroom_cdf(rep, Level.RPP) == [(10e3, 1 / 3), (20e3, 2 / 3), (30e3, 1.0)]

    def test_identical_headroom_is_one_step(self):
        rep = HeadroomReport({k: 5.0 for k in "abcd"}, {}, 0.0, {k: Level.SB for k in "abcd"})
        assert headroom_cdf(rep, Level.SB) == [(5.0, 1.0)]

    def test_empty_level_raises(self):
        rep = planned_headroom(rpp("r", []))
        with pytest.raises(EmptyDistributionError):
            headroom_cdf(rep, Level.MSB)

    def test_rows_cover_every_node(self):
        tree = synthetic_placement(n_msb=3, seed=1)
        rep = planned_headroom(tree)
        assert [r["node_id"] for r in rep.rows] == [n.id for n in iter_nodes(tree)]


class TestSyntheticPlacement:
    @pytest.mark.parametrize("seed", [0, 1, 2, 3])
    def test_published_shape(self, seed):
        rep = planned_headroom(synthetic_placement(seed=seed))
        msb = np.array(rep.values(Level.MSB))
        rpp_h = np.array(rep.values(Level.RPP))
        assert 150e3 <= msb.mean() <= 170e3
        assert np.mean(msb < 50e3) == pytest.approx(0.13, abs=0.01)
        assert 22e3 <= rpp_h.mean() <= 30e3

    def test_no_oversubscription(self):
        assert validate_tree(synthetic_placement(seed=5)).ok

    def test_seeded(self):
        a = planned_headroom(synthetic_placement(n_msb=4, seed=9)).per_node
        b = planned_headroom(synthetic_placement(n_msb=4, seed=9)).per_node
        assert a == b


# --- property suites ---------------------------------------------------------

watts = st.floats(min_value=0.0, max_value=60_000.0, allow_nan=False)


@st.composite
def trees(draw):
    n_sb = draw(st.integers(1, 3))
    sbs, k = [], 0
    for s in range(n_sb):
        rpps = []
        for r in range(draw(st.integers(1, 3))):
            racks = []
            for _ in range(draw(st.integers(0, 4))):
                if draw(st.booleans()):
                    racks.append(gpu(f"k{k}", draw(watts), draw(st.integers(1, 72))))
                else:
                    racks.append(RackAssignment(f"k{k}", RackType.SUPPORT, draw(watts)))
                k += 1
            rpps.append(rpp(f"s{s}r{r}", racks, cap=draw(st.floats(1e3, 3e5))))
        sbs.append(PowerNode(f"s{s}", Level.SB, draw(st.floats(1e4, 2e6)), rpps))
    return PowerNode("m", Level.MSB, 3e6, sbs)


class TestHeadroomProperties:
    @settings(max_examples=1000, deadline=None)
    @given(trees(), st.floats(1e5, 3e6))
    def test_additivity(self, tree, budget):
        rep = planned_headroom(tree, it_budget_per_msb=budget)
        for n in iter_nodes(tree):
            cap = budget if n.level is Level.MSB else n.capacity
            below = sum(c.provisioned() for c in n.nodes) + sum(r.provisioned_power for r in n.racks)
            assert abs(rep.per_node[n.id] - (cap - below)) <= 1.0

    @settings(max_examples=1000, deadline=None)
    @given(trees())
    def test_cdf_monotone_and_ends_at_one(self, tree):
        rep = planned_headroom(tree)
        for lvl in (Level.SB, Level.RPP):
            pts = headroom_cdf(rep, lvl)
            xs, ys = zip(*pts)
            assert list(xs) == sorted(xs) and len(set(xs)) == len(xs)
            assert all(a <= b for a, b in zip(ys, ys[1:]))
            assert ys[-1] == 1.0
            # right-continuity: the CDF at each point counts the point itself
            vals = rep.values(lvl)
            for x, y in pts:
                assert y == pytest.approx(sum(v <= x + 1e-9 for v in vals) / len(vals))

    @settings(max_examples=1000, deadline=None)
    @given(trees(), st.data())
    def test_removing_a_rack_never_lowers_headroom(self, tree, data):
        racks = list(tree.iter_racks())
        if not racks:
            return
        victim = data.draw(st.sampled_from(racks))
        before = planned_headroom(tree).per_node
        for n in iter_nodes(tree):
            if victim in n.children:
                n.children.remove(victim)
        after = planned_headroom(tree).per_node
        assert all(after[k] >= before[k] - 1e-9 for k in before)

    @settings(max_examples=1000, deadline=None)
    @given(trees())
    def test_stranded_fraction_in_unit_interval(self, tree):
        assert 0.0 <= planned_headroom(tree).stranded_fraction <= 1.0
