"""
Dimmer: reclaiming power when a panel limit drops
=================================================

One RPP feeds a two-rack low-priority job and a one-rack high-priority job.
From t=120 s to t=300 s its limit is cut by 22%, and the high-priority job
runs flat out for one minute.  The controller caps the low-priority job
first, to the minimum limit, and lets the caps expire after seven minutes.

Run with ``python3 notebooks/03_dimmer_case_study.py``.
"""

from dataclasses import replace

import numpy as np

from clusterpower.simengine.engine import run_simulation
from clusterpower.simengine.scenarios import case_study_scenario

sc = case_study_scenario(seed=0)
rep = run_simulation(sc)
ref = run_simulation(replace(sc, limit_events=()))
lo, hi = rep.job("low"), rep.job("high")

###############################################################################
# Timeline
# --------

for t in range(0, sc.duration, 60):
    print(f"  t={t:>4}s  RPP {rep.node('rpp0')[t] / 1e3:6.1f} kW   low limit {rep.job_min_tdp[lo, t]:6.0f} W"
          f"   high limit {rep.job_min_tdp[hi, t]:6.0f} W")

###############################################################################
# Effect on the low-priority job
# ------------------------------

capped = rep.job_min_tdp[lo] < sc.base_tdp
drop = 1 - rep.job_host_power[lo, capped].mean() / ref.job_host_power[lo, capped].mean()
print(f"capped for {capped.sum()} s; average host power down {drop:.1%}; trips: {len(rep.trips)}")
acts = [(e["t"], e["action"]) for e in rep.events if e["server_id"] == "k0-h00"]
print("events for k0-h00:", acts)

###############################################################################
# Literal mode
# ------------
# Following the published controller lines word for word clamps the first
# estimate at the base limit, so a surge needs the min-limit fallback.

lit = run_simulation(case_study_scenario(seed=0, literal=True))
print("literal mode, lowest limits:", lit.job_min_tdp.min(axis=1), "trips:", len(lit.trips))
