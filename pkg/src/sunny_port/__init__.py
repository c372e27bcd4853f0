"""k-NN solver-portfolio scheduling, parallel execution with bound sharing, and evaluation."""

from .kb import (
    Direction,
    Kind,
    KnowledgeBase,
    Outcome,
    ProblemInstance,
    SolverRecord,
    load_kb,
    load_kb_dir,
    neighbours,
    write_kb,
)
from .scheduler import ParallelSchedule, Schedule, parallelise, sunny_schedule
from .executor import ExecutorConfig, SolveResult, solve
from .metrics import Metric, evaluate, vbs, vps

__version__ = "0.1.0"

__all__ = [
    "Direction", "Kind", "KnowledgeBase", "Outcome", "ProblemInstance", "SolverRecord",
    "load_kb", "load_kb_dir", "neighbours", "write_kb",
    "ParallelSchedule", "Schedule", "parallelise", "sunny_schedule",
    "ExecutorConfig", "SolveResult", "solve", "Metric", "evaluate", "vbs", "vps",
]
