"""Solver backends: trace replay over KB records and external processes."""

from __future__ import annotations

import logging
import math
import os
import re
import signal
import subprocess
import sys
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from ..kb import BoundedBehaviour, Direction, Kind, KnowledgeBase, Outcome, ProblemInstance, SolverRecord, Trace

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

INF = math.inf
EPS = 1e-9

SOLUTION_SEP = "----------"
SEARCH_COMPLETE = "=========="
UNSATISFIABLE = "=====UNSATISFIABLE====="
UNBOUNDED = "=====UNBOUNDED====="
UNKNOWN = "=====UNKNOWN====="
ERROR = "=====ERROR====="


@dataclass(frozen=True)
class AdapterEvent:
    """Something a running solver reported.

    ``kind`` is ``"solution"`` (``value`` holds the objective, ``None`` for
    satisfaction problems), ``"complete"`` (``status`` is one of
    ``"search-complete"``, ``"uns"``, ``"unb"``) or ``"fail"``.
    """

    at: float
    kind: str
    value: float | None = None
    status: str | None = None
    detail: str | None = None


@dataclass(frozen=True)
class Capabilities:
    supports_pause_resume: bool = True
    supports_bound_injection: bool = True


# --- trace replay -------------------------------------------------------------

@dataclass(frozen=True)
class ReplayScript:
    """Behaviour of one solver on one instance, in solver-time seconds.

    ``fail_at`` makes the solver crash at that point of its run (used to model
    memory overflows and unsupported constraints).
    """

    outcome: Outcome
    time_s: float
    trace: Trace = ()
    fail_at: float | None = None
    with_bound: BoundedBehaviour | None = None

    @classmethod
    def from_record(cls, rec: SolverRecord) -> "ReplayScript":
        return cls(rec.outcome, rec.time_s, rec.trace, None, rec.with_bound)


_TERMINAL = {Outcome.OPT: "search-complete", Outcome.UNS: "uns", Outcome.UNB: "unb"}


def plan_events(script: ReplayScript, kind: Kind, direction: Direction, bound: float | None) -> list[tuple[float, AdapterEvent]]:
    """Events of a fresh run, keyed by solver-time offset from launch."""
    outcome, time_s, trace = script.outcome, script.time_s, script.trace
    wb = script.with_bound
    if bound is not None and wb is not None and not direction.better(wb.bound, bound):
        outcome, time_s, trace = wb.outcome, wb.time_s, wb.trace
    elif bound is not None:
        # a bounded restart only reports strictly better values, at their recorded times
        trace = tuple((t, v) for t, v in trace if direction.better(v, bound))
    events: list[tuple[float, AdapterEvent]] = []
    if kind is Kind.COP:
        events.extend((t, AdapterEvent(0.0, "solution", value=v)) for t, v in trace)
        if outcome in _TERMINAL:
            events.append((time_s, AdapterEvent(0.0, "complete", status=_TERMINAL[outcome])))
    elif outcome is Outcome.SAT:
        events.append((time_s, AdapterEvent(0.0, "solution")))
    elif outcome is Outcome.UNS:
        events.append((time_s, AdapterEvent(0.0, "complete", status="uns")))
    if script.fail_at is not None:
        events = [(t, e) for t, e in events if t < script.fail_at]
        events.append((script.fail_at, AdapterEvent(0.0, "fail", detail="scripted failure")))
    events.sort(key=lambda te: (te[0], te[1].kind != "solution"))
    return events


class ReplayHandle:
    """Plays a script back against the caller's clock; pausing freezes solver time."""

    def __init__(self, script: ReplayScript, kind: Kind, direction: Direction):
        self.script = script
        self.kind = kind
        self.direction = direction
        self._events: list[tuple[float, AdapterEvent]] = []
        self._idx = 0
        self._progress = 0.0
        self._since: float | None = None

    def launch(self, now: float, bound: float | None = None) -> None:
        self._events = plan_events(self.script, self.kind, self.direction, bound)
        self._idx = 0
        self._progress = 0.0
        self._since = now

    def pause(self, now: float) -> None:
        if self._since is not None:
            self._progress += now - self._since
            self._since = None

    def resume(self, now: float) -> None:
        if self._since is None:
            self._since = now

    def kill(self) -> None:
        self._since = None
        self._events = []
        self._idx = 0

    def progress(self, now: float) -> float:
        if self._since is None:
            return self._progress
        return self._progress + (now - self._since)

    def next_event_time(self) -> float:
        if self._since is None or self._idx >= len(self._events):
            return INF
        return self._since + (self._events[self._idx][0] - self._progress)

    def poll(self, now: float) -> list[AdapterEvent]:
        if self._since is None:
            return []
        done = self.progress(now) + EPS
        out = []
        while self._idx < len(self._events) and self._events[self._idx][0] <= done:
            t, ev = self._events[self._idx]
            at = self._since + (t - self._progress)
            out.append(AdapterEvent(at, ev.kind, ev.value, ev.status, ev.detail))
            self._idx += 1
        return out


@dataclass
class SolverAdapter:
    solver_id: str
    capabilities: Capabilities = field(default_factory=Capabilities)
    wait_time: float | None = None
    restart_time: float | None = None

    realtime = False

    def open(self, problem: ProblemInstance, clock, cfg) -> object:
        raise NotImplementedError


@dataclass
class ReplayAdapter(SolverAdapter):
    """Replays KB records, or hand-written scripts keyed by instance id."""

    kb: KnowledgeBase | None = None
    scripts: Mapping[str, ReplayScript] = field(default_factory=dict)

    def script_for(self, instance_id: str) -> ReplayScript:
        if instance_id in self.scripts:
            return self.scripts[instance_id]
        if self.kb is None or (instance_id, self.solver_id) not in self.kb.records:
            raise KeyError(f"no replay data for ({instance_id}, {self.solver_id})")
        return ReplayScript.from_record(self.kb.record(instance_id, self.solver_id))

    def open(self, problem, clock=None, cfg=None) -> ReplayHandle:
        return ReplayHandle(self.script_for(problem.id), problem.kind, problem.direction)


def replay_adapters(kb: KnowledgeBase, solvers: Sequence[str] | None = None) -> dict[str, ReplayAdapter]:
    return {s: ReplayAdapter(s, kb=kb) for s in (solvers or kb.portfolio)}


# --- MiniZinc output --------------------------------------------------------------

DEFAULT_OBJ_PATTERNS = (
    re.compile(r"^%\s*obj(?:ective)?\s*=\s*(-?\d+(?:\.\d+)?)"),
    re.compile(r"\bobjective\s*=\s*(-?\d+(?:\.\d+)?)\s*;?"),
)


class OutputParser:
    """Turns solver stdout lines into adapter events (timestamps left at 0)."""

    def __init__(self, obj_pattern: str | None = None):
        self.patterns = (re.compile(obj_pattern),) if obj_pattern else DEFAULT_OBJ_PATTERNS
        self._value: float | None = None
        self.solutions = 0
        self.terminal = False

    def _scan_objective(self, line: str) -> None:
        for pat in self.patterns:
            m = pat.search(line)
            if m:
                self._value = float(m.group(1))
                return

    def feed(self, line: str) -> list[AdapterEvent]:
        line = line.strip()
        if line == SOLUTION_SEP:
            self.solutions += 1
            value, self._value = self._value, None
            return [AdapterEvent(0.0, "solution", value=value)]
        if line == SEARCH_COMPLETE:
            self.terminal = True
            return [AdapterEvent(0.0, "complete", status="search-complete")]
        if line == UNSATISFIABLE:
            self.terminal = True
            return [AdapterEvent(0.0, "complete", status="uns")]
        if line == UNBOUNDED:
            self.terminal = True
            return [AdapterEvent(0.0, "complete", status="unb")]
        if line == ERROR:
            self.terminal = True
            return [AdapterEvent(0.0, "fail", detail="solver reported an error")]
        if line == UNKNOWN:
            return []
        self._scan_objective(line)
        return []


def parse_output(lines: Sequence[str], obj_pattern: str | None = None) -> list[AdapterEvent]:
    parser = OutputParser(obj_pattern)
    return [ev for line in lines for ev in parser.feed(line)]


# --- external processes -------------------------------------------------------------

def _format_bound(bound: float) -> str:
    return str(int(bound)) if float(bound).is_integer() else repr(float(bound))


def build_command(
    template: Sequence[str],
    instance: str,
    bound: float | None,
    options: Sequence[str] = (),
    extra: Sequence[str] = (),
) -> list[str]:
    """Fill ``{instance}``/``{obj_bound}``; tokens mentioning the bound are dropped when there is none."""
    argv = []
    for token in template:
        if "{obj_bound}" in token:
            if bound is None:
                continue
            token = token.replace("{obj_bound}", _format_bound(bound))
        argv.append(token.replace("{instance}", instance))
    return argv + list(options) + list(extra)


class ProcessHandle:
    def __init__(self, adapter: "ProcessAdapter", problem: ProblemInstance, clock, cfg):
        self.adapter = adapter
        self.problem = problem
        self.clock = clock
        self.cfg = cfg
        self._lock = threading.Lock()
        self._pending: list[AdapterEvent] = []
        self._proc: subprocess.Popen | None = None
        self._generation = 0
        self.bound_violations = 0

    def _preexec(self) -> Callable[[], None] | None:
        mem = getattr(self.cfg, "memory_limit_mb", None)
        if not mem:
            return None

        def limit():
            import resource

            nbytes = int(mem) * 1024 * 1024
            resource.setrlimit(resource.RLIMIT_AS, (nbytes, nbytes))

        return limit

    def _push(self, gen: int, events: list[AdapterEvent]) -> None:
        with self._lock:
            if gen != self._generation:
                return
            now = self.clock.now()
            self._pending.extend(AdapterEvent(now, e.kind, e.value, e.status, e.detail) for e in events)
        self.clock.notify()

    def _reader(self, proc: subprocess.Popen, gen: int) -> None:
        parser = OutputParser(self.adapter.obj_pattern)
        assert proc.stdout is not None
        for line in proc.stdout:
            events = parser.feed(line)
            if events:
                self._push(gen, events)
        code = proc.wait()
        if not parser.terminal:
            self._push(gen, [AdapterEvent(0.0, "fail", detail=f"exited with code {code} without a verdict")])

    def launch(self, now: float, bound: float | None = None) -> None:
        self.kill()
        extra = []
        if getattr(self.cfg, "ignore_search_annotations", False) and self.adapter.free_search_flag:
            extra.append(self.adapter.free_search_flag)
        argv = build_command(self.adapter.command, self.problem.id, bound, self.adapter.options, extra)
        with self._lock:
            self._generation += 1
            gen = self._generation
            self._pending = []
        self._proc = subprocess.Popen(
            argv,
            stdout=subprocess.PIPE,
            stderr=subprocess.DEVNULL,
            stdin=subprocess.DEVNULL,
            text=True,
            start_new_session=True,
            preexec_fn=self._preexec(),
        )
        threading.Thread(target=self._reader, args=(self._proc, gen), daemon=True).start()

    def _signal(self, sig) -> None:
        if self._proc is None or self._proc.poll() is not None:
            return
        try:
            os.killpg(self._proc.pid, sig)
        except ProcessLookupError:
            pass

    def pause(self, now: float) -> None:
        self._signal(signal.SIGSTOP)

    def resume(self, now: float) -> None:
        self._signal(signal.SIGCONT)

    def kill(self) -> None:
        with self._lock:
            self._generation += 1
            self._pending = []
        if self._proc is not None:
            self._signal(signal.SIGCONT)
            self._signal(signal.SIGKILL)
            try:
                self._proc.wait(timeout=5)
            except subprocess.TimeoutExpired:  # pragma: no cover
                log.warning("solver %s did not die", self.adapter.solver_id)
            self._proc = None

    def next_event_time(self) -> float:
        with self._lock:
            return min((e.at for e in self._pending), default=INF)

    def poll(self, now: float) -> list[AdapterEvent]:
        with self._lock:
            out, self._pending = self._pending, []
        return out


@dataclass
class ProcessAdapter(SolverAdapter):
    command: Sequence[str] = ()
    options: Sequence[str] = ()
    obj_pattern: str | None = None
    free_search_flag: str | None = None

    realtime = True

    def __post_init__(self):
        if not any("{instance}" in tok for tok in self.command):
            raise ValueError(f"{self.solver_id}: command template needs an {{instance}} placeholder")
        has_bound = any("{obj_bound}" in tok for tok in self.command)
        if has_bound != self.capabilities.supports_bound_injection:
            raise ValueError(
                f"{self.solver_id}: {{obj_bound}} placeholder must be present iff bound injection is enabled"
            )

    def open(self, problem, clock, cfg) -> ProcessHandle:
        return ProcessHandle(self, problem, clock, cfg)


def _as_argv(value, key: str, solver: str) -> list[str]:
    if isinstance(value, str):
        import shlex

        return shlex.split(value)
    if isinstance(value, list) and all(isinstance(v, str) for v in value):
        return list(value)
    raise ValueError(f"solver {solver}: {key} must be a string or a list of strings")


def adapters_from_mapping(solvers: Mapping[str, Mapping]) -> dict[str, ProcessAdapter]:
    out = {}
    for sid, spec in solvers.items():
        known = {
            "command", "bound_injection", "pause", "wait_time", "restart_time",
            "options", "obj_pattern", "free_search_flag",
        }
        unknown = set(spec) - known
        if unknown:
            raise ValueError(f"solver {sid}: unknown keys {sorted(unknown)}")
        if "command" not in spec:
            raise ValueError(f"solver {sid}: missing command")
        command = _as_argv(spec["command"], "command", sid)
        caps = Capabilities(
            supports_pause_resume=bool(spec.get("pause", True)),
            supports_bound_injection=bool(spec.get("bound_injection", any("{obj_bound}" in t for t in command))),
        )
        out[sid] = ProcessAdapter(
            sid,
            caps,
            wait_time=spec.get("wait_time"),
            restart_time=spec.get("restart_time"),
            command=command,
            options=_as_argv(spec.get("options", []), "options", sid),
            obj_pattern=spec.get("obj_pattern"),
            free_search_flag=spec.get("free_search_flag"),
        )
    return out


def load_registry(path: str | Path) -> dict[str, ProcessAdapter]:
    """Read ``[solvers.<id>]`` tables from a TOML registry file."""
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    solvers = data.get("solvers")
    if not isinstance(solvers, dict) or not solvers:
        raise ValueError(f"{path}: no [solvers.<id>] tables")
    return adapters_from_mapping(solvers)
