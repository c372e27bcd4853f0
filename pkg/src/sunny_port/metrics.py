"""Evaluation metrics (proven, time, score, area) and oracle baselines.

``score`` and ``area`` only make sense for optimization problems.  Both are
expressed through an instantaneous quality ``q(t)``:

* 0 before any solution is known,
* ``0.75 - 0.5 * |v - best| / |worst - best|`` once the best value so far is
  ``v`` (0.75 when best and worst coincide),
* 1 from the moment optimality (or unsatisfiability/unboundedness) is proven.

``score`` is ``q`` at the stroke of the timeout and ``area`` integrates
``1 - q`` over ``[0, T]``.  Events happening exactly at ``T`` or later are
ignored by every metric.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .kb import Direction, Kind, KnowledgeBase, Outcome, ProblemInstance, SolverRecord, Trace

_DEFINITIVE_CSP = frozenset({Outcome.SAT, Outcome.UNS})
_DEFINITIVE_COP = frozenset({Outcome.OPT, Outcome.UNS, Outcome.UNB})


class Metric(enum.Enum):
    PROVEN = "proven"
    TIME = "time"
    SCORE = "score"
    AREA = "area"

    @property
    def higher_is_better(self) -> bool:
        return self in (Metric.PROVEN, Metric.SCORE)

    def best(self, values: Iterable[float]) -> float:
        return max(values) if self.higher_is_better else min(values)

    def better(self, a: float, b: float, tol: float = 1e-9) -> bool:
        return a > b + tol if self.higher_is_better else a < b - tol


@dataclass(frozen=True)
class RunReport:
    """What any run (a KB record or a portfolio solve) tells the metrics."""

    kind: Kind
    direction: Direction
    outcome: Outcome
    time_s: float
    trace: Trace = ()

    @classmethod
    def from_record(cls, rec: SolverRecord, inst: ProblemInstance) -> "RunReport":
        return cls(inst.kind, inst.direction, rec.outcome, rec.time_s, rec.trace)

    @property
    def definitive(self) -> bool:
        allowed = _DEFINITIVE_CSP if self.kind is Kind.CSP else _DEFINITIVE_COP
        return self.outcome in allowed


@dataclass(frozen=True)
class InstanceBounds:
    instance_id: str
    direction: Direction
    best_known: float | None
    worst_known: float | None
    optimum_proven: bool = False

    def quality(self, value: float) -> float:
        if self.best_known is None or self.worst_known is None:
            raise ValueError(f"{self.instance_id}: no known solutions to scale against")
        d = self.direction
        if d.better(value, self.best_known) or d.better(self.worst_known, value):
            raise ValueError(
                f"{self.instance_id}: value {value} outside known range "
                f"[{self.best_known}, {self.worst_known}]"
            )
        span = abs(self.worst_known - self.best_known)
        if span == 0:
            return 0.75
        return 0.75 - 0.5 * abs(value - self.best_known) / span


@dataclass(frozen=True)
class MetricValue:
    proven: int
    time: float
    score: float | None = None
    area: float | None = None

    def get(self, metric: Metric) -> float | None:
        return getattr(self, metric.value)


def compute_bounds(instance_id: str, direction: Direction, reports: Iterable[RunReport], timeout: float) -> InstanceBounds:
    values = []
    proven = False
    for r in reports:
        values.extend(v for t, v in r.trace if t < timeout)
        if r.outcome is Outcome.OPT and r.time_s < timeout:
            proven = True
    if not values:
        return InstanceBounds(instance_id, direction, None, None, proven)
    return InstanceBounds(instance_id, direction, direction.best(values), direction.worst(values), proven)


def eval_proven_time(report: RunReport, timeout: float) -> tuple[int, float]:
    if timeout <= 0:
        raise ValueError("timeout must be positive")
    if report.definitive and report.time_s < timeout:
        return 1, float(report.time_s)
    return 0, float(timeout)


def _check_monotone(trace: Trace, direction: Direction) -> None:
    for (t0, v0), (t1, v1) in zip(trace, trace[1:]):
        if not (t1 > t0 and direction.better(v1, v0)):
            raise ValueError(f"non-monotone trace at ({t0}, {v0}) -> ({t1}, {v1})")


def eval_score(report: RunReport, bounds: InstanceBounds, timeout: float) -> float:
    if report.kind is not Kind.COP:
        raise ValueError("score is defined for optimization problems only")
    if report.definitive and report.time_s < timeout:
        return 1.0
    found = [v for t, v in report.trace if t < timeout]
    if not found:
        return 0.0
    return bounds.quality(found[-1])


def quality_steps(report: RunReport, bounds: InstanceBounds, timeout: float) -> list[tuple[float, float]]:
    """Breakpoints ``(t, q)`` of the quality step function on ``[0, T)``."""
    _check_monotone(report.trace, report.direction)
    proof = report.time_s if report.definitive and report.time_s < timeout else None
    steps = [(0.0, 0.0)]
    for t, v in report.trace:
        if t >= timeout or (proof is not None and t >= proof):
            break
        steps.append((max(t, 0.0), bounds.quality(v)))
    if proof is not None:
        steps.append((max(proof, 0.0), 1.0))
    return steps


def eval_area(report: RunReport, bounds: InstanceBounds, timeout: float) -> float:
    if report.kind is not Kind.COP:
        raise ValueError("area is defined for optimization problems only")
    steps = quality_steps(report, bounds, timeout)
    area = 0.0
    for (t0, q), (t1, _) in zip(steps, steps[1:] + [(timeout, 0.0)]):
        area += (t1 - t0) * (1.0 - q)
    return min(max(area, 0.0), timeout)


def evaluate(report: RunReport, bounds: InstanceBounds | None, timeout: float) -> MetricValue:
    proven, time = eval_proven_time(report, timeout)
    if report.kind is Kind.CSP:
        return MetricValue(proven, time)
    if bounds is None:
        raise ValueError("optimization problems need instance bounds")
    return MetricValue(proven, time, eval_score(report, bounds, timeout), eval_area(report, bounds, timeout))


# --- baselines -----------------------------------------------------------------

MetricTable = Mapping[str, Mapping[str, MetricValue]]  # instance -> solver -> value


def solver_metrics(kb: KnowledgeBase, extra: Mapping[str, Sequence[RunReport]] | None = None) -> dict[str, dict[str, MetricValue]]:
    """Metric values of every portfolio solver on every KB instance.

    Score scales are computed per instance over the whole portfolio plus any
    ``extra`` reports (e.g. portfolio runs being compared).
    """
    table: dict[str, dict[str, MetricValue]] = {}
    for pid, inst in kb.instances.items():
        reports = {s: RunReport.from_record(kb.record(pid, s), inst) for s in kb.portfolio}
        bounds = None
        if inst.kind is Kind.COP:
            pool = list(reports.values()) + list((extra or {}).get(pid, ()))
            bounds = compute_bounds(pid, inst.direction, pool, kb.timeout)
        table[pid] = {s: evaluate(r, bounds, kb.timeout) for s, r in reports.items()}
    return table


def vbs(values: Iterable[MetricValue], metric: Metric) -> float:
    """Per-instance oracle: the best value of ``metric`` over the given solvers."""
    present = [v.get(metric) for v in values]
    present = [x for x in present if x is not None]
    if not present:
        raise ValueError(f"metric {metric.value} undefined for these runs")
    return metric.best(present)


def _averages(table: MetricTable, solvers: Sequence[str], metric: Metric) -> dict[str, float]:
    avg = {}
    for s in solvers:
        vals = [row[s].get(metric) for row in table.values()]
        vals = [x for x in vals if x is not None]
        if not vals:
            raise ValueError(f"metric {metric.value} undefined on this dataset")
        avg[s] = sum(vals) / len(vals)
    return avg


def vps_from_table(table: MetricTable, solvers: Sequence[str], c: int, metric: Metric) -> tuple[tuple[str, ...], dict[str, float]]:
    if not 1 <= c <= len(solvers):
        raise ValueError(f"c must lie in [1, {len(solvers)}]")
    avg = _averages(table, solvers, metric)
    sign = -1.0 if metric.higher_is_better else 1.0
    chosen = tuple(sorted(solvers, key=lambda s: (sign * avg[s], s))[:c])
    per_instance = {}
    for pid, row in table.items():
        vals = [row[s].get(metric) for s in chosen]
        if any(v is None for v in vals):
            continue
        per_instance[pid] = metric.best(vals)
    return chosen, per_instance


def vps(kb: KnowledgeBase, c: int, metric: Metric) -> tuple[tuple[str, ...], dict[str, float]]:
    """The static c-solver portfolio with the best dataset averages of ``metric``."""
    return vps_from_table(solver_metrics(kb), kb.portfolio, c, metric)
