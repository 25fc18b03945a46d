"""Scenario runner, telemetry and reports for latency/scalability experiments."""
from .scenario import (
    WORKLOAD_PRODUCERS, ScenarioConfig, InvariantBreach, run_scenario, spawn_producers,
)
from .metrics import MetricsRecord, collect_resources, resource_trend
from .report import emit_report, load_record, summarise

__all__ = [
    "WORKLOAD_PRODUCERS", "ScenarioConfig", "InvariantBreach", "run_scenario", "spawn_producers",
    "MetricsRecord", "collect_resources", "resource_trend", "emit_report", "load_record", "summarise",
]
