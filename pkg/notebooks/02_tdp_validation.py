"""
Validating a higher GPU power limit with rack telemetry
=======================================================

PSU readings over-report rack power.  Against a panel meter, a per-minute
percentile of the PSU stream tracks the truth best; that corrected reading
then says how far the limit can rise within the rack budget.

Run with ``python3 notebooks/02_tdp_validation.py`` (about 10 s).
"""

from clusterpower.hierarchy import Level, headroom_cdf, planned_headroom, synthetic_placement
from clusterpower.powerperf import default_curves
from clusterpower.rackmodel import catalina_gb200
from clusterpower.telemetry import STATS, aggregator_study, calibrated_rack_generator, validate_tdp_uplift

gen = calibrated_rack_generator(duration=1800.0)

###############################################################################
# Which per-minute statistic matches the panel meter?
# ---------------------------------------------------

study = aggregator_study(gen, 1020.0, seeds=[0, 1, 2])
for k in STATS:
    print(f"  {k:<5} mean error {study.mean_errors[k]:+.4f}")
print("best:", study.best)

###############################################################################
# Raising the limit
# -----------------
# Sweep the limit on the 10 W grid; keep the highest one whose worst minute
# fits the 49.6 kW rack budget.

up = validate_tdp_uplift(catalina_gb200(), default_curves(), gen, 49_600.0, stat=study.best)
for p, v in list(up.stat_by_p.items())[::4]:
    print(f"  {p:>6.0f} W  worst minute {v:,.0f} W")
print("validated limit:", up.p)

###############################################################################
# Where is the headroom?
# ----------------------
# Planned headroom over a synthetic placement of 54 MSBs.

rep = planned_headroom(synthetic_placement(seed=0))
cdf = headroom_cdf(rep, Level.MSB)
for x, y in cdf[:: max(1, len(cdf) // 6)]:
    print(f"  MSB headroom <= {x / 1e3:7.1f} kW : {y:.2f}")
print(f"stranded fraction {rep.stranded_fraction:.3f}")
