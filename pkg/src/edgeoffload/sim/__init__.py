"""Virtual-time simulation of the control plane plus latency, tracking and
cost models."""

from .cost import OnPremCost, PricingTable, cost_table, monthly_cost
from .engine import Event, TraceReport, run_scenario
from .latency import LatencyProfile, RttStats, roundtrip_latency, rtt_stats, tracking_feasibility
from .scenario import ScenarioConfig, load_scenario, parse_scenario

__all__ = [
    "Event",
    "LatencyProfile",
    "OnPremCost",
    "PricingTable",
    "RttStats",
    "ScenarioConfig",
    "TraceReport",
    "cost_table",
    "load_scenario",
    "monthly_cost",
    "parse_scenario",
    "roundtrip_latency",
    "rtt_stats",
    "run_scenario",
    "tracking_feasibility",
]
