"""
Cluster throughput through the power-management phases
=======================================================

(a) 1200 W plan, (b) 960 W plan with more racks, (c) the same racks at the
validated 1020 W, (d) a higher base limit with the controller keeping every
device under its rating.  Also shows the smoother and the breaker curves.

Run with ``python3 notebooks/04_phases.py`` (about 10 s).
"""

from clusterpower.simengine.breaker import msb_curve, rpp_curve, time_to_trip
from clusterpower.simengine.engine import run_simulation
from clusterpower.simengine.scenarios import overcommitted_scenario, phase_scenarios, smoother_scenario
from clusterpower.simengine.smoother import swing_amplitude

###############################################################################
# Phases
# ------

reports = {k: run_simulation(sc) for k, sc in phase_scenarios(seed=0).items()}
ref = reports["a"].throughput.mean()
for k, r in reports.items():
    print(f"  phase {k}: relative throughput {r.throughput.mean() / ref:.3f}  "
          f"cap events {r.summary['cap_events']:>6}  trips {len(r.trips)}")

###############################################################################
# Why the controller matters
# --------------------------

for on in (False, True):
    r = run_simulation(overcommitted_scenario(seed=0, dimmer=on))
    print(f"  overcommitted MSBs, controller {'on ' if on else 'off'}: trips {[t['node_id'] for t in r.trips]}")

###############################################################################
# Smoother
# --------

on, off = run_simulation(smoother_scenario(True)), run_simulation(smoother_scenario(False))
m = on.msb_ids[0]
print(f"  swing with smoother {swing_amplitude(on.node(m)) / 1e3:.0f} kW, "
      f"without {swing_amplitude(off.node(m)) / 1e3:.0f} kW")

###############################################################################
# Breaker curves
# --------------

for ratio in (1.05, 1.10, 1.20, 1.40):
    print(f"  {ratio:.2f}x rating: RPP trips after {time_to_trip(rpp_curve(), ratio)} s, "
          f"MSB after {time_to_trip(msb_curve(), ratio)} s")
