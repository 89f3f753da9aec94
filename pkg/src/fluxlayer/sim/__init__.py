from .engine import World, detect_opportunities, paired_compare, run
from .report import MetricsReport
from .scenario import ParseError, Scenario, ScenarioError, ValidationError, load_scenario, parse_scenario

__all__ = [
    "MetricsReport",
    "ParseError",
    "Scenario",
    "ScenarioError",
    "ValidationError",
    "World",
    "detect_opportunities",
    "load_scenario",
    "paired_compare",
    "parse_scenario",
    "run",
]
