"""Operational simulator: traces, straggler coupling, smoother, breakers, controllers."""

from .engine import LimitEvent, Outage, SimReport, SimScenario, Surge, run_simulation

__all__ = ["LimitEvent", "Outage", "SimReport", "SimScenario", "Surge", "run_simulation"]
