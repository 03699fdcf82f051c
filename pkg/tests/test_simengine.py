from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clusterpower.hierarchy import Level, PowerNode, iter_nodes
from clusterpower.powerperf import default_curves
from clusterpower.simengine.breaker import (
    BreakerState,
    TripCurve,
    breaker_update,
    msb_curve,
    rpp_curve,
    sb_curve,
    time_to_trip,
)
from clusterpower.simengine.engine import LimitEvent, Outage, SimScenario, run_simulation
from clusterpower.simengine.latency import DelayedChannel, LatencyModel, arrival_times
from clusterpower.simengine.mechanical import MechanicalProfile, mechanical_load
from clusterpower.simengine.scenarios import (
    case_study_scenario,
    overcommitted_scenario,
    smoother_scenario,
)
from clusterpower.simengine.smoother import SmootherConfig, apply_smoother, swing_amplitude
from clusterpower.simengine.straggler import apply_straggler, even_vs_concentrated, straggler_factor
from clusterpower.simengine.traces import COMPUTE, EXPOSED_COMM, Phase, JobSpec, LoadWave, gen_trace, single_job

CURVES = default_curves()


def f_oracle(p):
    # independent linear interpolation through the published anchors
    return float(np.interp(p, [900.0, 1000.0, 1200.0], [0.88, 0.95, 1.0]))


class TestTraces:
    def test_no_comm_is_constant(self):
        job = single_job(1, phase_profile=(Phase(10.0, COMPUTE, 0.9),), wave=LoadWave(0.0, 37.0, 0.0), jitter=0.0)
        tr = gen_trace(job, 1000.0, seed=3, duration=120)
        assert np.allclose(tr.host_power(1000.0), 2 * 900.0 + 755.0)

    def test_duty_cycle_mean(self):
        prof = (Phase(8.0, COMPUTE, 1.0), Phase(2.0, EXPOSED_COMM, 0.4))
        job = single_job(1, phase_profile=prof, wave=LoadWave(0.0, 37.0, 0.0), jitter=0.0, step_jitter=0.0)
        tr = gen_trace(job, 1000.0, seed=0, duration=10_000, phase_offset=0.0)
        assert tr.host_power(1000.0).mean() == pytest.approx(0.88 * 1000 * 2 + 755.0, rel=1e-3)

    def test_deterministic(self):
        job = single_job(4)
        a, b = gen_trace(job, 1020.0, seed=5), gen_trace(job, 1020.0, seed=5)
        assert np.array_equal(a.level, b.level)
        assert not np.array_equal(a.level, gen_trace(job, 1020.0, seed=6).level)

    def test_lower_limit_stretches_steps(self):
        job = single_job(1, jitter=0.0, step_jitter=0.0, wave=LoadWave(0.0, 37.0, 0.0))
        fast = gen_trace(job, 1200.0, CURVES, seed=0, duration=2000, phase_offset=0.0)
        slow = gen_trace(job, 900.0, CURVES, seed=0, duration=2000, phase_offset=0.0)
        assert slow.compute.mean() > fast.compute.mean()

    def test_bad_profiles(self):
        with pytest.raises(ValueError):
            single_job(1, phase_profile=(Phase(2.0, EXPOSED_COMM, 0.3),))
        with pytest.raises(ValueError):
            single_job(1, phase_profile=(Phase(8.0, COMPUTE, 0.3), Phase(2.0, EXPOSED_COMM, 0.5)))
        with pytest.raises(ValueError):
            Phase(0.0, COMPUTE, 0.5)


class TestBreaker:
    def test_rpp_110_percent(self):
        assert time_to_trip(rpp_curve(), 1.10) == pytest.approx(17 * 60, rel=0.10)

    def test_rpp_140_percent(self):
        assert time_to_trip(rpp_curve(), 1.40) == pytest.approx(60, rel=0.10)

    @pytest.mark.parametrize("curve", [rpp_curve(), sb_curve(), msb_curve()], ids=lambda c: c.label)
    def test_at_rating_never_trips(self, curve):
        assert time_to_trip(curve, 1.0, horizon=86_400.0) is None

    def test_msb_points_kept(self):
        c = msb_curve()
        assert c.allowed_duration(1.15) == pytest.approx(60.0)
        assert c.allowed_duration(1.20) == pytest.approx(45.0)

    def test_decay_after_overdraw(self):
        c, s = rpp_curve(), BreakerState()
        for k in range(30):
            breaker_update(c, s, 1.4, 1.0, now=k)
        assert s.accumulator == pytest.approx(0.5, rel=0.01)
        for k in range(2000):
            breaker_update(c, s, 0.9, 1.0, now=30 + k)
        assert s.accumulator == 0.0 and not s.tripped

    def test_curve_validation(self):
        with pytest.raises(ValueError):
            TripCurve(((1.1, 60.0), (1.4, 600.0)))
        with pytest.raises(ValueError):
            TripCurve(((1.0, 60.0), (1.4, 30.0)))

    @settings(max_examples=1000, deadline=None)
    @given(st.floats(1.001, 3.0), st.floats(1.001, 3.0))
    def test_duration_monotone(self, a, b):
        c = rpp_curve()
        lo, hi = sorted((a, b))
        assert c.allowed_duration(hi) <= c.allowed_duration(lo)

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=500))
    def test_never_trips_at_or_below_rating(self, ratios):
        s = BreakerState()
        assert all(breaker_update(sb_curve(), s, r, 1.0, now=k) for k, r in enumerate(ratios))


class TestStraggler:
    def test_uniform(self):
        assert straggler_factor([960.0] * 8, 1020.0, CURVES) == pytest.approx(f_oracle(960) / f_oracle(1020))

    def test_one_slow_host(self):
        job = single_job(4)
        tdps = {h: 1020.0 for h in job.server_ids}
        tdps[job.server_ids[0]] = 900.0
        level = np.full(5, 0.95)
        factor, power = apply_straggler(job, tdps, CURVES, 1020.0, level)
        assert factor == pytest.approx(0.88 / 0.955, rel=1e-9)
        assert factor == pytest.approx(0.92, abs=0.005)
        assert power[0, 0] == pytest.approx(2 * 900 * 0.95 + 755.0)
        assert power[1, 0] == pytest.approx(2 * 1020 * 0.95 * factor + 755.0)

    def test_missing_host(self):
        with pytest.raises(KeyError):
            apply_straggler(single_job(2), {}, CURVES, 1020.0)

    @settings(max_examples=1000, deadline=None)
    @given(st.integers(2, 64), st.data())
    def test_even_beats_concentrated(self, n, data):
        q = data.draw(st.integers(1, n - 1))
        total = data.draw(st.floats(0.0, 2 * q * 120.0))
        even, conc = even_vs_concentrated(CURVES, 1020.0, n, total, q)
        assert even is not None
        if conc is not None:
            assert even >= conc - 1e-12


class TestSmoother:
    def test_above_floor_unchanged(self):
        p, mult = apply_smoother([850.0, 900.0], SmootherConfig(), tdp=1000.0)
        assert list(p) == [850.0, 900.0] and mult == 1.0

    def test_square_wave(self):
        wave = np.tile([300.0, 1000.0], 10)
        p, mult = apply_smoother(wave, SmootherConfig(), tdp=1000.0)
        assert set(p) == {800.0, 1000.0}
        assert swing_amplitude(wave, 2) == 700.0 and swing_amplitude(p, 2) == 200.0
        assert mult == pytest.approx(0.98) and p.max() == wave.max()

    def test_floor_above_tdp(self):
        with pytest.raises(ValueError):
            apply_smoother([100.0], SmootherConfig(floor_power=1000.0), tdp=900.0)

    def test_overhead_bound(self):
        with pytest.raises(ValueError):
            SmootherConfig(overhead_fraction=0.05)

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.floats(0.0, 1200.0), min_size=1, max_size=50),
           st.lists(st.booleans(), min_size=50, max_size=50))
    def test_floor_and_no_speedup(self, trace, active):
        act = np.array(active[: len(trace)])
        p, mult = apply_smoother(trace, SmootherConfig(), tdp=1200.0, active=act)
        assert mult <= 1.0
        assert np.all(p[act] >= 800.0 - 1e-9)
        assert p.max() == max(trace) or p.max() == 800.0


class TestLatency:
    def test_distribution(self):
        d = LatencyModel().sample(np.random.default_rng(0), 100_000)
        assert np.median(d) < 1.0 and d.max() <= 4.5

    def test_command_delay_bound(self):
        with pytest.raises(ValueError):
            LatencyModel(command_delay_s=2.0)

    def test_channel_fifo(self):
        ch = DelayedChannel()
        ch.send(0.0, 3.0, "a")
        ch.send(1.0, 0.5, "b")  # would overtake "a"
        assert ch.receive(2.0) == []
        assert ch.receive(3.0) == ["a", "b"]

    @settings(max_examples=1000, deadline=None)
    @given(st.lists(st.floats(0.0, 4.5), min_size=1, max_size=200))
    def test_no_reordering(self, delays):
        send = np.arange(len(delays), dtype=float)
        arr = arrival_times(send, np.array(delays))
        assert np.all(np.diff(arr) >= 0) and np.all(arr >= send + np.array(delays) - 1e-12)


class TestMechanical:
    def test_afternoon_peak_exceeds_plan(self):
        prof = MechanicalProfile(noise=0.0)
        day = mechanical_load(prof, np.arange(0, 86_400, 60.0), start_hour=0.0)
        assert day.max() > prof.plan_w and day.min() < prof.plan_w

    def test_bad_shape(self):
        with pytest.raises(ValueError):
            MechanicalProfile(shape=((1, 0.8), (24, 0.8)))


def small_scenario(**kw):
    return replace(case_study_scenario(seed=kw.pop("seed", 0), duration=kw.pop("duration", 400)), **kw)


class TestEngine:
    def test_no_jobs_mechanical_only(self):
        sc = small_scenario(jobs=[], surges=(), mechanical=MechanicalProfile(), duration=120)
        r = run_simulation(sc)
        msb = r.node("msb0")
        assert np.allclose(msb - r.mechanical[0], r.node("sb0"))
        assert not r.events and not r.trips and r.throughput.sum() == 0.0

    def test_unknown_rpp(self):
        bad = JobSpec("x", (("h", "nowhere"),))
        with pytest.raises(ValueError, match="nowhere"):
            run_simulation(small_scenario(jobs=[bad]))

    def test_case_study_end_to_end(self):
        sc = case_study_scenario(seed=0)
        r = run_simulation(sc)
        c = run_simulation(replace(sc, limit_events=()))
        lo, hi = r.job("low"), r.job("high")
        assert r.job_min_tdp[lo].min() == 900.0
        assert r.job_min_tdp[hi].min() == 1020.0
        assert not r.trips
        assert np.all(r.job_min_tdp[:, -1] == 1020.0)
        w = r.job_min_tdp[lo] < 1020.0
        drop = 1 - r.job_host_power[lo, w].mean() / c.job_host_power[lo, w].mean()
        assert 0.04 <= drop <= 0.10
        acts = [e["action"] for e in r.events]
        assert acts.index("cap") < acts.index("uncap")

    def test_controller_outage_falls_back_to_safe(self):
        sc = small_scenario(outages=(Outage(50.0, 200.0),), limit_events=(), surges=())
        r = run_simulation(sc)
        assert np.all(r.job_min_tdp[:, 100] == 960.0)
        assert np.all(r.job_min_tdp[:, 40] == 1020.0)
        assert np.all(r.job_min_tdp[:, 260] == 1020.0)

    def test_commands_land_after_delay(self):
        r = run_simulation(case_study_scenario(seed=0, duration=400))
        first = next(e for e in r.events if e["action"] == "cap")
        k = int(first["t"])
        lo = r.job("low")
        assert r.job_min_tdp[lo, k - 1] == 1020.0
        assert r.job_min_tdp[lo, k + 1] < 1020.0

    def test_surge_on_unknown_job(self):
        with pytest.raises(ValueError, match="high"):
            run_simulation(small_scenario(jobs=[]))

    def test_zero_horizon(self):
        r = run_simulation(small_scenario(duration=0))
        assert r.throughput.shape == (0,) and r.summary["ticks"] == 0

    def test_smoother_floor_must_sit_below_base(self):
        with pytest.raises(ValueError):
            run_simulation(small_scenario(smoother=SmootherConfig(floor_power=1100.0)))


@pytest.fixture(scope="module")
def runs():
    return run_simulation(smoother_scenario(True)), run_simulation(smoother_scenario(False))


class TestSmootherScenario:
    def test_swing_reduced(self, runs):
        on, off = runs
        msb = on.msb_ids[0]
        assert swing_amplitude(on.node(msb)) < 0.30 * swing_amplitude(off.node(msb))

    def test_penalty(self, runs):
        on, off = runs
        assert 1 - on.throughput.mean() / off.throughput.mean() <= 0.03

    def test_no_speedup(self, runs):
        on, off = runs
        assert on.throughput.mean() <= off.throughput.mean()

    def test_per_gpu_floor(self, runs):
        on, _ = runs
        per_gpu = (on.job_host_power[0] - 755.0) / 2
        assert per_gpu.min() >= 800.0 - 1e-6


class TestOvercommitted:
    def test_trip_without_dimmer(self):
        assert run_simulation(overcommitted_scenario(0, dimmer=False)).trips

    def test_no_trip_with_dimmer(self):
        assert not run_simulation(overcommitted_scenario(0, dimmer=True)).trips


# --- invariants over randomized small scenarios ------------------------------


@st.composite
def tiny_sims(draw):
    n = draw(st.integers(1, 3))
    jobs = []
    for k in range(n):
        hosts = tuple((f"j{k}h{i}", "rpp0") for i in range(draw(st.integers(1, 4))))
        jobs.append(JobSpec(f"j{k}", hosts, priority=draw(st.integers(0, 2))))
    sc = case_study_scenario(seed=draw(st.integers(0, 2**16)), duration=draw(st.integers(0, 40)))
    return replace(sc, jobs=jobs, limit_events=(), surges=(),
                   mechanical=MechanicalProfile() if draw(st.booleans()) else None)


class TestEngineProperties:
    @settings(max_examples=1000, deadline=None)
    @given(tiny_sims())
    def test_energy_accounting(self, sc):
        r = run_simulation(sc)
        nodes = {n.id: n for n in iter_nodes(sc.hierarchy)}
        k = 0
        for nid, n in nodes.items():
            if n.level is Level.RPP:
                continue
            child = sum(r.node(c.id) for c in n.nodes)
            mech = r.mechanical[r.msb_ids.index(nid)] if n.level is Level.MSB else 0.0
            assert np.array_equal(r.node(nid), child + mech) or np.allclose(r.node(nid), child + mech, rtol=0, atol=1e-6)
            k += 1
        assert k == 2

    @settings(max_examples=1000, deadline=None)
    @given(tiny_sims())
    def test_determinism(self, sc):
        a, b = run_simulation(sc), run_simulation(sc)
        assert np.array_equal(a.node_power, b.node_power)
        assert np.array_equal(a.throughput, b.throughput)
        assert a.events == b.events and a.trips == b.trips

    @settings(max_examples=1000, deadline=None)
    @given(tiny_sims(), st.integers(0, 20), st.booleans())
    def test_hosts_reach_safe_limit_when_controllers_die(self, sc, start, surge_cut):
        # controllers fall silent at ``start``; hosts must sit at safe_tdp
        # from heartbeat_timeout + one tick after the last heartbeat
        sc = replace(sc, duration=start + 60, outages=(Outage(float(start), 1e9),))
        if surge_cut:
            sc = replace(sc, limit_events=((LimitEvent(0.0, 1e9, "rpp0", 0.2)),))
        r = run_simulation(sc)
        dec = int(sc.dimmer.decision_interval)
        last_hb = max((k + 1 for k in range(start) if (k + 1) % dec == 0), default=0)
        deadline = int(last_hb + sc.dimmer.heartbeat_timeout) + 1
        if r.job_ids:
            assert np.all(r.job_min_tdp[:, deadline:] == sc.dimmer.safe_tdp)
