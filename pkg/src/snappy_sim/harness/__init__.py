"""Scenario scripting, built-in suites, fuzzing, benchmarks and auditing."""

from .scenario import Scenario
from .world import RunResult, World, run_scenario

__all__ = ["Scenario", "RunResult", "World", "run_scenario"]
