"""Deterministic simulation of registry, workers and client on virtual time."""

from .scenario import (REGISTRY, CrashAfterKTasks, CrashAtTime, DropAfterAssign, Scenario,
                       ScenarioResult, SpeedupReport, WorkerSpec, makespan_ms,
                       parse_scenario, run_scenario, sim_processors, speedup_report)
from .sim import SimNetwork, VirtualTimeLoop, run_virtual

__all__ = [
    'REGISTRY', 'CrashAfterKTasks', 'CrashAtTime', 'DropAfterAssign', 'Scenario', 'ScenarioResult',
    'SpeedupReport', 'WorkerSpec', 'makespan_ms', 'parse_scenario', 'run_scenario',
    'sim_processors', 'speedup_report', 'SimNetwork', 'VirtualTimeLoop', 'run_virtual',
]
