"""Two-phase solving: presolve (static schedule + neighbourhood detection), then
the dynamic parallel schedule, with bound sharing between COP solvers.

A single control loop owns every :class:`RunState`.  Backends only report
events; the loop decides what to start, suspend, resume, restart or kill.
The loop runs against a clock: :class:`VirtualClock` jumps straight to the
next event (trace replay, fully deterministic) while :class:`WallClock`
polls real processes every ``tick_s`` seconds.
"""

from __future__ import annotations

import json
import logging
import math
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

from ..kb import DEFAULT_K, Direction, Kind, KnowledgeBase, Neighbourhood, Outcome, ProblemInstance, neighbours
from ..metrics import RunReport
from ..scheduler import ParallelSchedule, Schedule, parallelise, sunny_schedule
from .adapters import INF, AdapterEvent, ReplayAdapter, SolverAdapter, replay_adapters
from .policies import RunState, Status, apply_restart_policy, apply_waiting_policy

log = logging.getLogger(__name__)

EPS = 1e-9


@dataclass
class ExecutorConfig:
    cores: int = 1
    timeout: float = 1800.0
    wait_time: float = 2.0
    restart_time: float = 5.0
    static_schedule: Schedule = field(default_factory=Schedule)
    anytime: bool = True
    memory_limit_mb: int | None = None
    ignore_search_annotations: bool = False
    solver_options: Mapping[str, Mapping[str, float]] = field(default_factory=dict)
    k: int = DEFAULT_K
    # charged on the virtual clock for feature extraction + k-NN
    detection_cost_s: float = 5.0
    tick_s: float = 0.1

    def __post_init__(self):
        if self.cores < 1:
            raise ValueError("cores must be >= 1")
        if not self.timeout > 0:
            raise ValueError("timeout must be positive")
        if self.wait_time < 0 or self.restart_time < 0:
            raise ValueError("wait/restart thresholds must be non-negative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.detection_cost_s < 0:
            raise ValueError("detection cost must be non-negative")

    def _per_solver(self, solver: str, key: str, adapter: SolverAdapter | None, default: float) -> float:
        opts = self.solver_options.get(solver, {})
        if key in opts:
            return float(opts[key])
        from_adapter = getattr(adapter, key, None) if adapter is not None else None
        return float(from_adapter) if from_adapter is not None else default

    def wait_time_for(self, solver: str, adapter: SolverAdapter | None = None) -> float:
        return self._per_solver(solver, "wait_time", adapter, self.wait_time)

    def restart_time_for(self, solver: str, adapter: SolverAdapter | None = None) -> float:
        return self._per_solver(solver, "restart_time", adapter, self.restart_time)


@dataclass(frozen=True)
class LogEvent:
    t: float
    event: str
    solver: str | None = None
    core: int | None = None
    value: float | None = None
    detail: str | None = None

    def to_dict(self) -> dict:
        out = {"t": round(self.t, 6), "event": self.event}
        for key in ("solver", "core", "value", "detail"):
            val = getattr(self, key)
            if val is not None:
                out[key] = val
        return out


@dataclass
class SolveResult:
    outcome: Outcome
    best_bound: float | None
    winner: str | None
    wall_time_s: float
    events: list[LogEvent]
    kind: Kind
    direction: Direction
    trace: tuple[tuple[float, float], ...] = ()
    presolve_time_s: float | None = None
    schedule: ParallelSchedule | None = None

    def report(self) -> RunReport:
        return RunReport(self.kind, self.direction, self.outcome, self.wall_time_s, self.trace)

    def to_dict(self) -> dict:
        return {
            "outcome": self.outcome.name,
            "best_bound": self.best_bound,
            "winner": self.winner,
            "wall_time": round(self.wall_time_s, 6),
            "presolve_time": None if self.presolve_time_s is None else round(self.presolve_time_s, 6),
            "schedule": None if self.schedule is None else self.schedule.to_json()["cores"],
            "events": [e.to_dict() for e in self.events],
        }

    def to_json(self, **kwargs) -> str:
        return json.dumps(self.to_dict(), **kwargs)


@dataclass
class Presolved:
    """Presolve ended without an answer; the solving phase picks up from here."""

    neighbourhood: Neighbourhood | None
    elapsed_s: float
    states: dict[str, RunState]
    engine: "Engine" = field(repr=False)


# --- clocks -------------------------------------------------------------------------

class VirtualClock:
    realtime = False

    def __init__(self, start: float = 0.0):
        self._now = start

    def now(self) -> float:
        return self._now

    def wait(self, until: float) -> float:
        if until == INF:
            raise RuntimeError("virtual clock cannot wait forever")
        self._now = max(self._now, until)
        return self._now

    def notify(self) -> None:
        pass


class WallClock:
    realtime = True

    def __init__(self, tick_s: float = 0.1):
        self.tick_s = tick_s
        self._t0 = time.monotonic()
        self._wake = threading.Event()

    def now(self) -> float:
        return time.monotonic() - self._t0

    def wait(self, until: float) -> float:
        timeout = min(until - self.now(), self.tick_s)
        if timeout > 0:
            self._wake.wait(timeout)
        self._wake.clear()
        return self.now()

    def notify(self) -> None:
        self._wake.set()


# --- engine -------------------------------------------------------------------------

class Engine:
    def __init__(
        self,
        problem: ProblemInstance,
        cfg: ExecutorConfig,
        kb: KnowledgeBase,
        adapters: Mapping[str, SolverAdapter],
        clock=None,
    ):
        self.problem = problem
        self.cfg = cfg
        self.kb = kb
        self.adapters = dict(adapters)
        self.portfolio = [s for s in kb.portfolio if s in self.adapters]
        self.portfolio += sorted(s for s in self.adapters if s not in kb.portfolio)
        if clock is None:
            realtime = any(a.realtime for a in self.adapters.values())
            clock = WallClock(cfg.tick_s) if realtime else VirtualClock()
        self.clock = clock
        self.states = {s: RunState(s) for s in self.portfolio}
        self.handles: dict[str, object] = {}
        self.cores: list[str | None] = [None] * cfg.cores
        self.direction = problem.direction
        self.global_best: float | None = None
        self.best_by: str | None = None
        self.trace: list[tuple[float, float]] = []
        self.events: list[LogEvent] = []
        self.result: SolveResult | None = None
        self.now = self.clock.now()
        self._last = self.now
        self._warned_injection: set[str] = set()
        # presolve bookkeeping
        self.static_queue: deque = deque()
        self.detect_needed = True
        self.detect_started: float | None = None
        self.detect_ends: float | None = None
        self.neighbourhood: Neighbourhood | None = None
        self.presolve_time: float | None = None
        # solving-phase bookkeeping
        self.core_queues: list[deque] | None = None
        self.schedule: ParallelSchedule | None = None

    # -- logging / small helpers -----------------------------------------------------

    def emit(self, event: str, solver=None, core=None, value=None, detail=None) -> None:
        self.events.append(LogEvent(self.now, event, solver, core, value, detail))

    @property
    def is_cop(self) -> bool:
        return self.problem.kind is Kind.COP

    def running(self) -> list[str]:
        return [s for s in self.cores if s is not None]

    def free_cores(self) -> list[int]:
        return [i for i, s in enumerate(self.cores) if s is None]

    def _handle(self, solver: str):
        h = self.handles.get(solver)
        if h is None:
            h = self.adapters[solver].open(self.problem, self.clock, self.cfg)
            self.handles[solver] = h
        return h

    def _can_inject(self, solver: str) -> bool:
        return self.adapters[solver].capabilities.supports_bound_injection

    def _injectable_bound(self, solver: str) -> float | None:
        if self.is_cop and self.global_best is not None and self._can_inject(solver):
            return self.global_best
        return None

    # -- state transitions ----------------------------------------------------------

    def launch(self, solver: str, core: int, allotted: float, indefinite: bool = False) -> None:
        st = self.states[solver]
        h = self._handle(solver)
        if st.status is Status.SUSPENDED and not st.relaunch_on_resume:
            h.resume(self.now)
            self.emit("resume", solver, core + 1, detail=f"{allotted:.6g}s")
        else:
            bound = self._injectable_bound(solver)
            h.launch(self.now, bound)
            if st.status is Status.SUSPENDED:
                st.restarts += 1
                self.emit("restart", solver, core + 1, value=bound, detail="resume without pause support")
            else:
                self.emit("start", solver, core + 1, value=bound, detail=f"{allotted:.6g}s")
            st.launched_at_s = st.elapsed_s
            st.injected_bound = bound
            st.best_bound = None
            st.last_solution_at_s = None
            st.relaunch_on_resume = False
        st.status = Status.RUNNING
        st.core = core
        st.allotted_s = allotted
        st.slot_started_at_s = st.elapsed_s
        st.indefinite = indefinite
        self.cores[core] = solver

    def _release(self, solver: str) -> None:
        st = self.states[solver]
        if st.core is not None and self.cores[st.core] == solver:
            self.cores[st.core] = None
        st.core = None

    def suspend(self, solver: str) -> None:
        st = self.states[solver]
        core = st.core
        h = self.handles[solver]
        if self.adapters[solver].capabilities.supports_pause_resume:
            h.pause(self.now)
            self.emit("suspend", solver, core + 1)
        else:
            h.kill()
            st.relaunch_on_resume = True
            self.emit("suspend", solver, core + 1, detail="killed: no pause support")
        st.status = Status.SUSPENDED
        self._release(solver)

    def discard(self, solver: str, reason: str | None) -> None:
        st = self.states[solver]
        core = st.core
        self.handles[solver].kill()
        st.status = Status.FAILED
        self.emit("fail", solver, None if core is None else core + 1, detail=reason)
        st.status = Status.DISCARDED
        self.emit("discard", solver)
        self._release(solver)

    def restart(self, solver: str) -> None:
        st = self.states[solver]
        bound = self.global_best
        self.handles[solver].kill()
        self.handles[solver].launch(self.now, bound)
        st.restarts += 1
        st.launched_at_s = st.elapsed_s
        st.injected_bound = bound
        st.best_bound = None
        st.last_solution_at_s = None
        self.emit("restart", solver, st.core + 1, value=bound)

    def finish(self, outcome: Outcome, winner: str | None, best: float | None, detail: str | None = None) -> None:
        for s in self.running():
            self.handles[s].kill()
            if s != winner:
                self.states[s].status = Status.SUSPENDED
            self._release(s)
        for s, st in self.states.items():
            if st.status is Status.SUSPENDED and s in self.handles:
                self.handles[s].kill()
        if winner is not None:
            self.states[winner].status = Status.FINISHED
        if outcome is Outcome.UNK:
            best = None
        self.emit("end", winner, value=best, detail=outcome.name if detail is None else f"{outcome.name}: {detail}")
        self.result = SolveResult(
            outcome=outcome,
            best_bound=best,
            winner=winner,
            wall_time_s=self.now,
            events=self.events,
            kind=self.problem.kind,
            direction=self.direction,
            trace=tuple(self.trace),
            presolve_time_s=self.presolve_time,
            schedule=self.schedule,
        )

    def finish_best_known(self, detail: str) -> None:
        if self.is_cop and self.global_best is not None:
            self.finish(Outcome.SAT, self.best_by, self.global_best, detail)
        else:
            self.finish(Outcome.UNK, None, None, detail)

    # -- events ---------------------------------------------------------------------

    def on_event(self, solver: str, ev: AdapterEvent) -> None:
        st = self.states[solver]
        if st.status is not Status.RUNNING:
            return
        core = st.core + 1
        if ev.kind == "fail":
            self.discard(solver, ev.detail)
        elif ev.kind == "solution":
            if not self.is_cop:
                self.emit("solution", solver, core)
                self.finish(Outcome.SAT, solver, None)
                return
            v = ev.value
            if v is None:
                self.emit("solution", solver, core, detail="objective not found in output")
                return
            if st.injected_bound is not None and not self.direction.better(v, st.injected_bound):
                self.emit("bound-violation", solver, core, value=v, detail=f"injected {st.injected_bound:g}")
                return
            if st.best_bound is None or self.direction.better(v, st.best_bound):
                st.best_bound = v
                st.last_solution_at_s = st.elapsed_s
            self.emit("solution", solver, core, value=v)
            if self.global_best is None or self.direction.better(v, self.global_best):
                self.global_best = v
                self.best_by = solver
                if self.trace and self.trace[-1][0] == self.now:
                    self.trace[-1] = (self.now, v)
                else:
                    self.trace.append((self.now, v))
                self.emit("bound", solver, value=v)
        elif ev.kind == "complete":
            self._on_complete(solver, st, ev.status)

    def _on_complete(self, solver: str, st: RunState, status: str | None) -> None:
        if status == "unb":
            if self.is_cop:
                self.finish(Outcome.UNB, solver, None)
            else:
                self.discard(solver, "unbounded reported for a satisfaction problem")
            return
        if not self.is_cop:
            self.finish(Outcome.UNS, solver, None)
            return
        if status == "search-complete":
            if self.global_best is None and st.injected_bound is None:
                self.finish(Outcome.UNS, solver, None)
            else:
                self.finish(Outcome.OPT, solver, self.global_best)
            return
        # "uns": no solution at all, or none better than the injected bound
        if st.injected_bound is not None:
            self.finish(Outcome.OPT, solver, self.global_best)
        elif self.global_best is None:
            self.finish(Outcome.UNS, solver, None)
        else:
            self.discard(solver, "claims unsatisfiable although solutions are known")

    # -- time ------------------------------------------------------------------------

    def _wall_at(self, st: RunState, solver_time: float) -> float:
        return self.now + max(solver_time - st.elapsed_s, 0.0)

    def _slot_deadline(self, st: RunState) -> float:
        if st.indefinite:
            return INF
        target = st.slot_end_s
        wait = self.cfg.wait_time_for(st.solver_id, self.adapters[st.solver_id])
        if st.last_solution_at_s is not None and wait > 0:
            target = max(target, st.last_solution_at_s + wait)
        return self._wall_at(st, target)

    def _restart_wanted(self, st: RunState) -> bool:
        if not self.is_cop or self.global_best is None:
            return False
        own = st.bound(self.direction)
        if own is not None and not self.direction.better(self.global_best, own):
            return False
        if not self._can_inject(st.solver_id):
            if st.solver_id not in self._warned_injection:
                self._warned_injection.add(st.solver_id)
                self.emit("no-restart", st.solver_id, detail="adapter cannot inject bounds")
            return False
        return True

    def _restart_deadline(self, st: RunState) -> float:
        if not self._restart_wanted(st):
            return INF
        quiet = st.launched_at_s
        if st.last_solution_at_s is not None:
            quiet = max(quiet, st.last_solution_at_s)
        return self._wall_at(st, quiet + self.cfg.restart_time_for(st.solver_id, self.adapters[st.solver_id]))

    def next_time(self) -> float:
        cands = [INF]
        for s in self.running():
            st = self.states[s]
            cands.append(self._slot_deadline(st))
            cands.append(self._restart_deadline(st))
            cands.append(self.handles[s].next_event_time())
        if self.detect_ends is not None and self.neighbourhood is None:
            cands.append(self.detect_ends)
        if not self.cfg.anytime:
            cands.append(self.cfg.timeout)
        return min(cands)

    def advance(self, now: float) -> None:
        dt = max(now - self._last, 0.0)
        for s in self.running():
            self.states[s].elapsed_s += dt
        self._last = now
        self.now = now

    def collect(self) -> None:
        batch = []
        for core, s in enumerate(self.cores):
            if s is None:
                continue
            for ev in self.handles[s].poll(self.now):
                batch.append((ev.at, core, s, ev))
        batch.sort(key=lambda item: (item[0], item[1], item[3].kind != "solution"))
        for _, _, s, ev in batch:
            if self.result is not None:
                return
            self.on_event(s, ev)

    def deadlines(self) -> None:
        if self.detect_ends is not None and self.neighbourhood is None and self.now >= self.detect_ends - EPS:
            self._finish_detection()
        for s in list(self.running()):
            st = self.states[s]
            if st.indefinite:
                continue
            if st.elapsed_s >= st.slot_end_s - EPS:
                wait = self.cfg.wait_time_for(s, self.adapters[s])
                if not apply_waiting_policy(st, st.elapsed_s, wait):
                    self.suspend(s)
                    continue
        for s in list(self.running()):
            st = self.states[s]
            if not self._restart_wanted(st):
                continue
            t_r = self.cfg.restart_time_for(s, self.adapters[s])
            if apply_restart_policy(st, self.global_best, st.elapsed_s, t_r, self.direction):
                self.restart(s)
        if not self.cfg.anytime and self.now >= self.cfg.timeout - EPS:
            self.finish_best_known("timeout")

    def loop(self, dispatch: Callable[[], None], done: Callable[[], bool]) -> None:
        while True:
            dispatch()
            if self.result is not None or done():
                return
            t = self.next_time()
            if t == INF and not self.clock.realtime:
                # replay data says nothing past T: the run is over at T
                if self.now < self.cfg.timeout:
                    self.advance(self.clock.wait(self.cfg.timeout))
                self.finish_best_known("no further events")
                return
            self.advance(self.clock.wait(t))
            self.collect()
            if self.result is not None:
                return
            self.deadlines()
            if self.result is not None:
                return

    # -- presolve ----------------------------------------------------------------------

    def _start_detection(self) -> None:
        self.detect_started = self.now
        self.emit("detect-start")
        if self.clock.realtime:
            self._compute_neighbourhood()
            self.detect_ends = self.clock.now()
        else:
            self.detect_ends = self.now + self.cfg.detection_cost_s

    def _compute_neighbourhood(self) -> None:
        pool = self.kb
        if self.problem.id in pool.instances and len(pool.instances) > 1:
            pool = pool.without([self.problem.id])
        self._nbh = neighbours(self.problem, pool, self.cfg.k)
        self._nbh_kb = pool

    def _finish_detection(self) -> None:
        if not self.clock.realtime:
            self._compute_neighbourhood()
        self.neighbourhood = self._nbh
        self.emit("detect-end", detail=f"{len(self.neighbourhood)} neighbours")

    def _presolve_dispatch(self) -> None:
        for core in self.free_cores():
            while self.static_queue:
                solver, t = self.static_queue.popleft()
                st = self.states.get(solver)
                if st is None or st.status in (Status.DISCARDED, Status.RUNNING):
                    continue
                self.launch(solver, core, t)
                break
        if (
            self.detect_needed
            and self.detect_started is None
            and not self.static_queue
            and len(self.running()) < self.cfg.cores
        ):
            self._start_detection()

    def _presolve_done(self) -> bool:
        detected = not self.detect_needed or self.neighbourhood is not None
        return detected and not self.static_queue and not self.running()

    def presolve(self) -> SolveResult | Presolved:
        unknown = [s for s in self.cfg.static_schedule.solvers if s not in self.adapters]
        if unknown:
            raise ValueError(f"static schedule names unknown solvers {unknown}")
        self.static_queue = deque(self.cfg.static_schedule.entries)
        self.detect_needed = self.cfg.cores < len(self.portfolio)
        self.emit("presolve", detail=f"{len(self.static_queue)} static entries")
        self.loop(self._presolve_dispatch, self._presolve_done)
        if self.result is not None:
            return self.result
        self.presolve_time = self.now
        if all(st.status is Status.DISCARDED for st in self.states.values()):
            self.finish(Outcome.UNK, None, None, "every solver failed")
            return self.result
        return Presolved(self.neighbourhood, self.now, self.states, self)

    # -- solving -----------------------------------------------------------------------

    def _usable(self) -> list[str]:
        return [s for s in self.portfolio if self.states[s].status is not Status.DISCARDED]

    def plan(self) -> ParallelSchedule:
        usable = self._usable()
        c = self.cfg.cores
        budget = self.cfg.timeout - self.now
        if budget <= 0:
            budget = self.cfg.timeout
        if c >= len(usable):
            self.emit("schedule", detail="one solver per core, no prediction")
            cores = [Schedule(((s, budget),)) for s in usable]
            cores += [Schedule() for _ in range(c - len(usable))]
            return ParallelSchedule(tuple(cores))
        nbh = self.neighbourhood
        if nbh is None or not len(nbh):
            self.emit("schedule", detail="empty neighbourhood, even split")
            sigma = Schedule(tuple((s, budget / len(usable)) for s in usable))
        else:
            sigma = sunny_schedule(nbh, self._nbh_kb, budget, solvers=usable)
        self.emit("schedule", detail=json.dumps(sigma.to_json()))
        return parallelise(sigma, c, budget)

    def _fallback(self) -> str | None:
        queued = {s for q in self.core_queues for s, _ in q}
        cands = [
            s for s in self.portfolio
            if self.states[s].status not in (Status.RUNNING, Status.DISCARDED, Status.FINISHED)
            and s not in queued
        ]
        fresh = [s for s in cands if self.states[s].status is Status.PENDING]
        pick = fresh or cands
        return pick[0] if pick else None

    def _solving_dispatch(self) -> None:
        for core in self.free_cores():
            queue = self.core_queues[core]
            launched = False
            while queue:
                solver, t = queue.popleft()
                st = self.states[solver]
                if st.status in (Status.DISCARDED, Status.RUNNING, Status.FINISHED):
                    continue
                self.launch(solver, core, t, indefinite=self.cfg.anytime and not queue)
                launched = True
                break
            if launched:
                continue
            if not self.cfg.anytime and self.now >= self.cfg.timeout - EPS:
                continue
            solver = self._fallback()
            if solver is not None:
                remaining = max(self.cfg.timeout - self.now, 0.0)
                self.emit("fallback", solver, core + 1)
                self.launch(solver, core, remaining, indefinite=self.cfg.anytime)

    def _solving_done(self) -> bool:
        if self.running():
            return False
        if any(self.core_queues):
            return False
        self.finish_best_known("portfolio exhausted")
        return True

    def run_schedule(self, schedule: ParallelSchedule) -> SolveResult:
        if schedule.cores > self.cfg.cores:
            raise ValueError("schedule uses more cores than configured")
        self.schedule = schedule
        self.core_queues = [deque(schedule.core(i + 1).entries) for i in range(schedule.cores)]
        self.core_queues += [deque() for _ in range(self.cfg.cores - schedule.cores)]
        self.emit("solve", detail=f"{self.cfg.cores} cores")
        self.loop(self._solving_dispatch, self._solving_done)
        assert self.result is not None
        return self.result

    def solving_phase(self) -> SolveResult:
        if self.result is not None:
            return self.result
        return self.run_schedule(self.plan())


# --- public entry points ----------------------------------------------------------------

def _adapters_for(kb: KnowledgeBase, adapters: Mapping[str, SolverAdapter] | None) -> Mapping[str, SolverAdapter]:
    return replay_adapters(kb) if adapters is None else adapters


def presolve(
    problem: ProblemInstance,
    cfg: ExecutorConfig,
    kb: KnowledgeBase,
    adapters: Mapping[str, SolverAdapter] | None = None,
    clock=None,
) -> SolveResult | Presolved:
    engine = Engine(problem, cfg, kb, _adapters_for(kb, adapters), clock)
    return engine.presolve()


def solve(
    problem: ProblemInstance,
    cfg: ExecutorConfig,
    kb: KnowledgeBase,
    adapters: Mapping[str, SolverAdapter] | None = None,
    clock=None,
) -> SolveResult:
    """Presolve, then run the predicted schedule in parallel.

    ``kb`` provides the neighbourhood and the runtime data SUNNY schedules
    from; ``adapters`` (default: trace replay of ``kb``) do the solving.
    """
    out = presolve(problem, cfg, kb, adapters, clock)
    if isinstance(out, SolveResult):
        return out
    return out.engine.solving_phase()
