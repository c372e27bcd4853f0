"""Run-state bookkeeping and the waiting/restarting thresholds.

All times on a :class:`RunState` are measured on the solver's own clock,
i.e. seconds it has actually been running (suspension freezes it).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

from ..kb import Direction

# absorbs float drift when the engine lands exactly on a computed deadline
EPS = 1e-9


class Status(enum.Enum):
    PENDING = "pending"
    RUNNING = "running"
    SUSPENDED = "suspended"
    FINISHED = "finished"
    FAILED = "failed"
    DISCARDED = "discarded"


@dataclass
class RunState:
    solver_id: str
    status: Status = Status.PENDING
    allotted_s: float = 0.0
    elapsed_s: float = 0.0
    last_solution_at_s: float | None = None
    best_bound: float | None = None
    restarts: int = 0
    # solver clock at the last launch or restart
    launched_at_s: float = 0.0
    slot_started_at_s: float = 0.0
    injected_bound: float | None = None
    core: int | None = None
    indefinite: bool = False
    relaunch_on_resume: bool = False

    def bound(self, direction: Direction) -> float | None:
        """Best objective the solver knows of: its own solutions or the bound it was given."""
        known = [b for b in (self.best_bound, self.injected_bound) if b is not None]
        return direction.best(known) if known else None

    @property
    def slot_end_s(self) -> float:
        return self.slot_started_at_s + self.allotted_s


def apply_waiting_policy(state: RunState, now: float, wait_time: float) -> bool:
    """Whether a solver whose slot expired keeps running: it found a solution in the last ``wait_time`` s."""
    if state.last_solution_at_s is None:
        return False
    return now - state.last_solution_at_s < wait_time - EPS


def apply_restart_policy(
    state: RunState,
    global_best: float | None,
    now: float,
    restart_time: float,
    direction: Direction,
) -> bool:
    """Whether to relaunch the solver with ``global_best`` injected."""
    if global_best is None or direction is Direction.NONE:
        return False
    own = state.bound(direction)
    if own is not None and not direction.better(global_best, own):
        return False
    quiet_since = state.launched_at_s
    if state.last_solution_at_s is not None:
        quiet_since = max(quiet_since, state.last_solution_at_s)
    return now - quiet_since >= restart_time - EPS
