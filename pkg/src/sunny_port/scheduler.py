"""SUNNY sequential schedules and their parallelisation over c cores."""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Iterable, Sequence

from .kb import Kind, KnowledgeBase, Neighbourhood, Outcome
from .metrics import RunReport, compute_bounds, eval_area, eval_score

BUDGET_TOL = 1e-3


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True)
class Schedule:
    entries: tuple[tuple[str, float], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple((str(s), float(t)) for s, t in self.entries))
        ids = [s for s, _ in self.entries]
        if len(set(ids)) != len(ids):
            raise ScheduleError(f"duplicate solvers in schedule: {ids}")
        if any(not t > 0 for _, t in self.entries):
            raise ScheduleError("schedule times must be positive")

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    @property
    def solvers(self) -> tuple[str, ...]:
        return tuple(s for s, _ in self.entries)

    @property
    def total(self) -> float:
        return math.fsum(t for _, t in self.entries)

    def to_json(self) -> list[list]:
        return [[s, t] for s, t in self.entries]


@dataclass(frozen=True)
class ParallelSchedule:
    per_core: tuple[Schedule, ...]

    def __post_init__(self):
        object.__setattr__(self, "per_core", tuple(self.per_core))
        ids = self.solvers
        if len(set(ids)) != len(ids):
            raise ScheduleError(f"solver scheduled on two cores: {ids}")

    @property
    def cores(self) -> int:
        return len(self.per_core)

    def core(self, i: int) -> Schedule:
        """Schedule of core ``i`` (1-based)."""
        return self.per_core[i - 1]

    @property
    def solvers(self) -> tuple[str, ...]:
        return tuple(s for sched in self.per_core for s in sched.solvers)

    def to_json(self) -> dict:
        return {"cores": [sched.to_json() for sched in self.per_core]}


def _check_inputs(nbh: Neighbourhood, kb: KnowledgeBase, budget: float) -> None:
    if not len(nbh):
        raise ScheduleError("empty neighbourhood")
    if not budget > 0:
        raise ScheduleError("budget must be positive")
    unknown = [i for i in nbh if i not in kb.instances]
    if unknown:
        raise ScheduleError(f"neighbours not in knowledge base: {unknown}")


def _portfolio(kb: KnowledgeBase, solvers: Iterable[str] | None) -> list[str]:
    allowed = kb.portfolio if solvers is None else [s for s in kb.portfolio if s in set(solvers)]
    if not allowed:
        raise ScheduleError("no solvers to schedule")
    return sorted(allowed)


def _select(candidates: list[str], covers, cost) -> tuple[str, ...]:
    """Smallest sub-portfolio for which ``covers`` holds, cheapest by ``cost``, then by ids."""
    for size in range(len(candidates) + 1):
        best = None
        for combo in itertools.combinations(candidates, size):
            if not covers(combo):
                continue
            key = (cost(combo), combo)
            if best is None or key < best:
                best = key
        if best is not None:
            return best[1]
    raise AssertionError("the full portfolio always covers itself")


def _allocate(weights: dict[str, float], budget: float) -> dict[str, float]:
    total = math.fsum(weights.values())
    return {s: budget * w / total for s, w in weights.items() if w > 0}


def sunny_schedule_csp(
    nbh: Neighbourhood, kb: KnowledgeBase, budget: float, solvers: Iterable[str] | None = None
) -> Schedule:
    _check_inputs(nbh, kb, budget)
    cand = _portfolio(kb, solvers)
    T = kb.timeout
    insts = list(nbh)
    for i in insts:
        if kb.instances[i].kind is not Kind.CSP:
            raise ScheduleError(f"{i} is not a satisfaction problem")
    time = {}
    solved = {}
    for s in cand:
        bits = 0
        for j, i in enumerate(insts):
            r = kb.record(i, s)
            ok = r.outcome in (Outcome.SAT, Outcome.UNS) and r.time_s < T
            time[s, i] = r.time_s if ok else T
            if ok:
                bits |= 1 << j
        solved[s] = bits

    def coverage(combo):
        bits = 0
        for s in combo:
            bits |= solved[s]
        return bits

    target = coverage(cand)
    selected = _select(
        cand,
        lambda combo: coverage(combo) == target,
        lambda combo: math.fsum(min((time[s, i] for s in combo), default=T) for i in insts),
    )
    total_time = {s: math.fsum(time[s, i] for i in insts) for s in cand}
    slots = {s: bin(solved[s]).count("1") for s in selected}
    unsolved = len(insts) - bin(target).count("1")
    if unsolved:
        backup = min(cand, key=lambda s: (-bin(solved[s]).count("1"), total_time[s], s))
        slots[backup] = slots.get(backup, 0) + unsolved
    alloc = _allocate(slots, budget)
    order = sorted(alloc, key=lambda s: (total_time[s], s))
    return Schedule(tuple((s, alloc[s]) for s in order))


def cop_scores(nbh: Neighbourhood, kb: KnowledgeBase, solvers: Sequence[str]):
    """Per (solver, instance) score and area from KB records, scaled over the whole portfolio."""
    score, area = {}, {}
    T = kb.timeout
    for i in nbh:
        inst = kb.instances[i]
        if inst.kind is not Kind.COP:
            raise ScheduleError(f"{i} is not an optimization problem")
        reports = {s: RunReport.from_record(kb.record(i, s), inst) for s in kb.portfolio}
        bounds = compute_bounds(i, inst.direction, reports.values(), T)
        for s in solvers:
            score[s, i] = eval_score(reports[s], bounds, T)
            area[s, i] = eval_area(reports[s], bounds, T)
    return score, area


def sunny_schedule_cop(
    nbh: Neighbourhood, kb: KnowledgeBase, budget: float, solvers: Iterable[str] | None = None
) -> Schedule:
    _check_inputs(nbh, kb, budget)
    cand = _portfolio(kb, solvers)
    insts = list(nbh)
    T = kb.timeout
    score, area = cop_scores(nbh, kb, cand)

    def total_score(combo):
        return math.fsum(max((score[s, i] for s in combo), default=0.0) for i in insts)

    target = total_score(cand)
    selected = _select(
        cand,
        lambda combo: total_score(combo) >= target - 1e-9,
        lambda combo: math.fsum(min((area[s, i] for s in combo), default=T) for i in insts),
    )
    summed = {s: math.fsum(score[s, i] for i in insts) for s in cand}
    summed_area = {s: math.fsum(area[s, i] for i in insts) for s in cand}
    weights = {s: summed[s] for s in selected}
    if not any(w > 0 for w in weights.values()):
        backup = min(cand, key=lambda s: (-summed[s], summed_area[s], s))
        weights = {backup: 1.0}
    alloc = _allocate(weights, budget)
    order = sorted(alloc, key=lambda s: (summed_area[s] / len(insts), s))
    return Schedule(tuple((s, alloc[s]) for s in order))


def sunny_schedule(
    nbh: Neighbourhood, kb: KnowledgeBase, budget: float, solvers: Iterable[str] | None = None
) -> Schedule:
    """Dispatch on the kind of the neighbourhood instances."""
    _check_inputs(nbh, kb, budget)
    kinds = {kb.instances[i].kind for i in nbh}
    if kinds == {Kind.CSP}:
        return sunny_schedule_csp(nbh, kb, budget, solvers)
    if kinds == {Kind.COP}:
        return sunny_schedule_cop(nbh, kb, budget, solvers)
    raise ScheduleError("neighbourhood mixes satisfaction and optimization problems")


def parallelise(sigma: Schedule, c: int, T: float) -> ParallelSchedule:
    """Pin the c-1 longest-allotted solvers to their own cores; stretch the rest onto core c."""
    if c < 1:
        raise ScheduleError("need at least one core")
    if sigma and abs(sigma.total - T) > BUDGET_TOL:
        raise ScheduleError(f"schedule sums to {sigma.total}, expected {T}")
    n = len(sigma)
    # descending time, then position in sigma
    ranked = sorted(range(n), key=lambda idx: (-sigma.entries[idx][1], idx))
    rank = {sigma.entries[idx][0]: r + 1 for r, idx in enumerate(ranked)}
    cores: list[Schedule] = []
    for i in range(1, c + 1):
        if i > n:
            cores.append(Schedule())
        elif i < c:
            solver = sigma.entries[ranked[i - 1]][0]
            cores.append(Schedule(((solver, float(T)),)))
        else:
            tail = [(s, t) for s, t in sigma if rank[s] >= c]
            T_c = math.fsum(t for _, t in tail)
            cores.append(Schedule(tuple((s, T / T_c * t) for s, t in tail)))
    return ParallelSchedule(tuple(cores))
