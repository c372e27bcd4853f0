"""Two-phase portfolio execution over pluggable solver backends."""

from .adapters import (
    AdapterEvent,
    Capabilities,
    OutputParser,
    ProcessAdapter,
    ReplayAdapter,
    ReplayScript,
    SolverAdapter,
    build_command,
    load_registry,
    parse_output,
    replay_adapters,
)
from .engine import (
    Engine,
    ExecutorConfig,
    LogEvent,
    Presolved,
    SolveResult,
    VirtualClock,
    WallClock,
    presolve,
    solve,
)
from .policies import RunState, Status, apply_restart_policy, apply_waiting_policy

__all__ = [
    "AdapterEvent", "Capabilities", "OutputParser", "ProcessAdapter", "ReplayAdapter", "ReplayScript",
    "SolverAdapter", "build_command", "load_registry", "parse_output", "replay_adapters",
    "Engine", "ExecutorConfig", "LogEvent", "Presolved", "SolveResult", "VirtualClock", "WallClock",
    "presolve", "solve", "RunState", "Status", "apply_restart_policy", "apply_waiting_policy",
]
