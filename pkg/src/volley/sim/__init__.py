"""Discrete-event simulation of hosts, clients and project servers."""

from .engine import EventKind, RunResult, Simulation, run, sample_outcome, stream
from .metrics import Metrics
from .scenario import Scenario, ScenarioError, digest, from_dict, load_scenario

__all__ = [
    "EventKind", "Metrics", "RunResult", "Scenario", "ScenarioError", "Simulation", "digest",
    "from_dict", "load_scenario", "run", "sample_outcome", "stream",
]
