"""
Provisioning a GPU cluster under a fixed datacenter power budget
=================================================================

Walks from one rack's power budget to the cluster-wide power limit that
maximizes throughput, then to per-rack limits under a power-delivery tree.

Run with ``python3 notebooks/01_provisioning.py``.
"""

import numpy as np

from clusterpower.hierarchy import Level, PowerNode, RackAssignment, RackType
from clusterpower.powerperf import default_curves, eta_table, f_eval, maximize_eta
from clusterpower.provisioner import (
    ProvisionInputs,
    compare_scenarios,
    power_ledger,
    solve_hierarchical,
    solve_relaxed,
    reference_columns,
    throughput,
)
from clusterpower.rackmodel import (
    backend_network,
    breakdown,
    catalina_gb200,
    max_ac_power,
    provisioned_rack_power,
    rack_ac_power,
    rack_dc_power,
)

model = catalina_gb200()
curves = default_curves()
net = backend_network()

###############################################################################
# One rack
# --------
# Component sums are derated, then VR, fan and PSU losses are added.  The
# provisioned figure nets out the oversubscription credit.

p = 960.0
print(f"DC {rack_dc_power(model, p):,.0f} W, AC {rack_ac_power(model, p):,.0f} W, "
      f"provisioned {provisioned_rack_power(model, p).provisioned:,.0f} W, max AC {max_ac_power(model):,.0f} W")
for row in breakdown(model, p)[:6]:
    print(f"  {row['name']:<24} {row['total_w']:>10,.0f} W")

###############################################################################
# Power ledger
# ------------
# What is left for GPU racks after turn-up reserve, network, support and
# liquid-cooling shares.

for k, v in power_ledger(ProvisionInputs()).items():
    print(f"  {k:<24} {v / 1e6:>8.2f} MW")

###############################################################################
# Performance per watt
# --------------------
# eta(p) = f(p) / g(p) peaks where a lower limit buys more GPUs than it costs
# in per-GPU speed.  Throughput is normalized to the 1200 W plan.

inputs = ProvisionInputs()
for e in eta_table(curves, model, None)[::5]:
    print(f"  p={e.p:>6.0f}  f={e.f:.3f}  g={e.g:7.1f} W  T={throughput(inputs, curves, model, net, e.p):.3f}")
opt = maximize_eta(curves, model, None, 900.0, 1200.0)
res = solve_relaxed(inputs, curves, model, net)
print(f"eta optimum {opt.p:g} W; plan at p*: {res.n_gpus:,} GPUs in {res.rack_count:,} racks")

###############################################################################
# Comparison across accelerators and limits
# -----------------------------------------

for row in compare_scenarios(reference_columns(model), net=net):
    print(f"  {row['label']:<14} {row['gpus']:>7,} GPUs  {row['aggregate_perf_norm']:.3f}x H100")

###############################################################################
# Per-rack limits under a power tree
# ----------------------------------
# Two RPPs share one switchboard that cannot carry both at full power.  The
# solver lowers the largest limits first, evenly within each panel.

q = lambda w: provisioned_rack_power(model, w).provisioned
r0 = PowerNode("rpp0", Level.RPP, 2 * q(1200.0), [RackAssignment(f"a{i}", RackType.GPU_COMPUTE, q(1200.0), 36)
                                                 for i in range(2)])
r1 = PowerNode("rpp1", Level.RPP, 2 * q(1000.0), [RackAssignment(f"b{i}", RackType.GPU_COMPUTE, q(1200.0), 36)
                                                 for i in range(2)])
sb = PowerNode("sb0", Level.SB, 2 * q(1100.0) + 2 * q(1000.0), [r0, r1])
assignment = solve_hierarchical(sb, curves, model)
print({k: v for k, v in sorted(assignment.per_rack_limits.items())})
print(f"objective {assignment.objective:.1f} GPU-equivalents of f(p); "
      f"upper bound {4 * 36 * f_eval(curves, 1200.0):.1f}")
