"""Scenario files, metrics and the command-line front end."""

from .cli import main, run_scenario
from .metrics import COLUMNS, MetricsRow, evaluate
from .scenario import Scenario, ScenarioError, bundled_scenarios, load_scenario, parse_scenario

__all__ = ["main", "run_scenario", "COLUMNS", "MetricsRow", "evaluate", "Scenario",
           "ScenarioError", "bundled_scenarios", "load_scenario", "parse_scenario"]
