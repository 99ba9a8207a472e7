"""Deterministic network simulator, fault injection and trace oracle."""

from .config import ClusterSpec, FaultSpec, LinkDelay, PlanViolation, SimConfig, Workload
from .oracle import Report, Violation, oracle_check
from .sim import RunResult, Simulation, run
from .stats import MessageStats, message_stats
from .trace import Trace, TraceFormatError, read_trace

__all__ = [
    "ClusterSpec", "FaultSpec", "LinkDelay", "PlanViolation", "SimConfig", "Workload",
    "Report", "Violation", "oracle_check", "RunResult", "Simulation", "run",
    "MessageStats", "message_stats", "Trace", "TraceFormatError", "read_trace",
]
