"""Scenario runner, logical clock and command line."""

from .clock import LogicalClock
from .scenario import ScenarioError, ScenarioReport, ScenarioRunner, list_scenarios, load_scenario, run_scenario

__all__ = [
    "LogicalClock",
    "ScenarioError",
    "ScenarioReport",
    "ScenarioRunner",
    "list_scenarios",
    "load_scenario",
    "run_scenario",
]
