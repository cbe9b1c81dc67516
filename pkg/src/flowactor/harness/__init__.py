"""Traffic, faults, metrics and oracles for simulated and benchmark runs."""

from .faults import FaultEvent, FaultScript, KillRuntime, RestoreLink, SilenceLink
from .golden import ChainMismatch, golden_compare, prefix_compare
from .metrics import MetricsReport
from .run import RunResult, run_scenario
from .scenario import Scenario, ScenarioError, load_scenario, parse_scenario
from .traffic import FlowClass, TrafficSpec, plan_flows

__all__ = [
    "ChainMismatch", "FaultEvent", "FaultScript", "FlowClass", "KillRuntime", "MetricsReport", "RestoreLink",
    "RunResult", "Scenario", "ScenarioError", "SilenceLink", "TrafficSpec", "golden_compare", "load_scenario",
    "parse_scenario", "plan_flows", "prefix_compare", "run_scenario",
]
