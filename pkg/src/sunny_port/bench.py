"""Cross-validated trace-replay benchmark of the portfolio against VBS and VPS_c."""

from __future__ import annotations

import csv
import io
import json
import random
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from .executor.adapters import replay_adapters
from .executor.engine import Engine, ExecutorConfig, SolveResult, VirtualClock, solve
from .kb import Kind, KnowledgeBase
from .metrics import Metric, MetricValue, RunReport, compute_bounds, evaluate, vps_from_table
from .scheduler import ParallelSchedule

N_FOLDS = 10
DEFAULT_CORES = (1, 2, 4, 8)
METRICS = (Metric.PROVEN, Metric.TIME, Metric.SCORE, Metric.AREA)
ROW_LABELS = {
    Metric.PROVEN: "proven (%)",
    Metric.TIME: "time (s)",
    Metric.SCORE: "score x 100",
    Metric.AREA: "area (s)",
}


class BenchError(ValueError):
    pass


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    folds: tuple[tuple[str, ...], ...]

    def __post_init__(self):
        seen: set[str] = set()
        for fold in self.folds:
            if seen & set(fold):
                raise BenchError("folds overlap")
            seen |= set(fold)
        sizes = [len(f) for f in self.folds]
        if sizes and max(sizes) - min(sizes) > 1:
            raise BenchError("fold sizes differ by more than one")

    def check_covers(self, ids: Iterable[str]) -> None:
        covered = {i for f in self.folds for i in f}
        if covered != set(ids):
            raise BenchError("folds do not cover the dataset exactly")


def make_folds(ids: Iterable[str], n_folds: int = N_FOLDS, seed: int = 0) -> FoldPlan:
    ids = sorted(ids)
    if len(ids) < n_folds:
        raise BenchError(f"need at least {n_folds} instances, got {len(ids)}")
    random.Random(seed).shuffle(ids)
    folds = [tuple(sorted(ids[i::n_folds])) for i in range(n_folds)]
    return FoldPlan(seed, tuple(folds))


def simulate_run(
    instance_id: str,
    schedule: ParallelSchedule,
    kb: KnowledgeBase,
    cfg: ExecutorConfig,
) -> SolveResult:
    """Replay ``schedule`` on one KB instance after the fixed detection overhead."""
    missing = [s for s in schedule.solvers if (instance_id, s) not in kb.records]
    if instance_id not in kb.instances or missing:
        raise BenchError(f"no records for {instance_id} on {missing or 'any solver'}")
    cfg = replace(cfg, cores=max(cfg.cores, schedule.cores))
    clock = VirtualClock()
    engine = Engine(kb.instances[instance_id], cfg, kb, replay_adapters(kb), clock)
    engine.advance(clock.wait(cfg.detection_cost_s))
    engine.presolve_time = engine.now
    return engine.run_schedule(schedule)


def _run_fold(kb: KnowledgeBase, test_ids: Sequence[str], cores: Sequence[int], cfg: ExecutorConfig):
    train = kb.without(test_ids)
    adapters = replay_adapters(kb)
    out = {}
    for pid in test_ids:
        problem = kb.instances[pid]
        out[pid] = {c: solve(problem, replace(cfg, cores=c), train, adapters) for c in cores}
    return out


def _fold_job(args):
    return _run_fold(*args)


def sunny_name(c: int) -> str:
    return f"sunny({c})"


def vps_name(c: int) -> str:
    return f"VPS({c})"


@dataclass
class BenchReport:
    seed: int
    timeout: float
    cores: tuple[int, ...]
    folds: FoldPlan
    portfolio: tuple[str, ...]
    aggregate: dict[str, dict[str, float | None]]
    vbs_wins: dict[str, dict[str, int]]
    vps_members: dict[str, dict[str, list[str]]]
    instances: list[dict] = field(default_factory=list)

    @property
    def strategies(self) -> list[str]:
        return (
            [sunny_name(c) for c in self.cores]
            + [vps_name(c) for c in self.cores]
            + ["VBS"]
            + list(self.portfolio)
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "timeout": self.timeout,
            "cores": list(self.cores),
            "folds": [list(f) for f in self.folds.folds],
            "portfolio": list(self.portfolio),
            "strategies": self.strategies,
            "aggregate": self.aggregate,
            "vbs_wins": self.vbs_wins,
            "vps_members": self.vps_members,
            "instances": self.instances,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_csv(self) -> str:
        """Metric rows by strategy columns: sunny(c)..., VPS(c)..., VBS."""
        cols = [sunny_name(c) for c in self.cores] + [vps_name(c) for c in self.cores] + ["VBS"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric"] + cols)
        for m in METRICS:
            vals = [self.aggregate[col][m.value] for col in cols]
            if all(v is None for v in vals):
                continue
            w.writerow([ROW_LABELS[m]] + ["" if v is None else f"{v:.2f}" for v in vals])
        return buf.getvalue()


def _mean(xs: list[float]) -> float | None:
    return sum(xs) / len(xs) if xs else None


def _scaled(metric: Metric, value: float | None) -> float | None:
    if value is None:
        return None
    return 100.0 * value if metric in (Metric.PROVEN, Metric.SCORE) else value


def _mv_dict(mv: MetricValue) -> dict:
    return {m.value: mv.get(m) for m in METRICS}


def cross_validate(
    kb: KnowledgeBase,
    cores: Sequence[int] = DEFAULT_CORES,
    cfg: ExecutorConfig | None = None,
    seed: int = 0,
    folds: FoldPlan | None = None,
    jobs: int = 1,
) -> BenchReport:
    cfg = cfg or ExecutorConfig(timeout=kb.timeout)
    if cfg.timeout != kb.timeout:
        cfg = replace(cfg, timeout=kb.timeout)
    cores = tuple(sorted(set(int(c) for c in cores)))
    if not cores or cores[0] < 1:
        raise BenchError("cores must be positive integers")
    if folds is None:
        folds = make_folds(kb.instances, N_FOLDS, seed)
    folds.check_covers(kb.instances)
    if len(kb.instances) < len(folds.folds):
        raise BenchError("knowledge base smaller than the number of folds")

    jobs_args = [(kb, fold, cores, cfg) for fold in folds.folds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(_fold_job, jobs_args))
    else:
        parts = [_run_fold(*a) for a in jobs_args]
    runs: dict[str, dict[int, SolveResult]] = {}
    for part in parts:
        runs.update(part)
    fold_of = {pid: i for i, fold in enumerate(folds.folds) for pid in fold}

    T = kb.timeout
    solver_table: dict[str, dict[str, MetricValue]] = {}
    sunny_table: dict[str, dict[str, MetricValue]] = {}
    for pid in sorted(kb.instances):
        inst = kb.instances[pid]
        solver_reports = {s: RunReport.from_record(kb.record(pid, s), inst) for s in kb.portfolio}
        sunny_reports = {sunny_name(c): runs[pid][c].report() for c in cores}
        bounds = None
        if inst.kind is Kind.COP:
            pool = list(solver_reports.values()) + list(sunny_reports.values())
            bounds = compute_bounds(pid, inst.direction, pool, T)
        solver_table[pid] = {s: evaluate(r, bounds, T) for s, r in solver_reports.items()}
        sunny_table[pid] = {n: evaluate(r, bounds, T) for n, r in sunny_reports.items()}

    has_cop = any(p.kind is Kind.COP for p in kb.instances.values())
    metrics = [m for m in METRICS if has_cop or m in (Metric.PROVEN, Metric.TIME)]
    per_instance: dict[str, dict[str, dict]] = {pid: {} for pid in solver_table}
    columns: dict[str, dict[str, list[float]]] = {}

    def put(pid, name, metric, value):
        per_instance[pid].setdefault(name, {})[metric.value] = value
        if value is not None:
            columns.setdefault(name, {}).setdefault(metric.value, []).append(value)

    vps_members: dict[str, dict[str, list[str]]] = {}
    for m in metrics:
        table = solver_table
        if m in (Metric.SCORE, Metric.AREA):
            table = {p: row for p, row in solver_table.items() if kb.instances[p].kind is Kind.COP}
        for c in cores:
            chosen, values = vps_from_table(table, kb.portfolio, min(c, len(kb.portfolio)), m)
            vps_members.setdefault(vps_name(c), {})[m.value] = list(chosen)
            for pid, v in values.items():
                put(pid, vps_name(c), m, v)
        for pid, row in table.items():
            put(pid, "VBS", m, m.best(mv.get(m) for mv in row.values()))
            for s, mv in row.items():
                put(pid, s, m, mv.get(m))
            for name, mv in sunny_table[pid].items():
                put(pid, name, m, mv.get(m))

    report_cols = [sunny_name(c) for c in cores] + [vps_name(c) for c in cores] + ["VBS"] + list(kb.portfolio)
    aggregate = {
        name: {m.value: _scaled(m, _mean(columns.get(name, {}).get(m.value, []))) for m in METRICS}
        for name in report_cols
    }
    wins = {}
    for c in cores:
        name = sunny_name(c)
        counts = {}
        for m in metrics:
            counts[m.value] = sum(
                1 for pid, row in per_instance.items()
                if m.value in row.get("VBS", {}) and row[name].get(m.value) is not None
                and m.better(row[name][m.value], row["VBS"][m.value])
            )
        wins[name] = counts

    instances = []
    for pid in sorted(per_instance):
        instances.append({
            "id": pid,
            "fold": fold_of[pid],
            "kind": kb.instances[pid].kind.value,
            "outcomes": {sunny_name(c): runs[pid][c].outcome.name for c in cores},
            "schedules": {
                sunny_name(c): None if runs[pid][c].schedule is None else runs[pid][c].schedule.to_json()["cores"]
                for c in cores
            },
            "metrics": per_instance[pid],
        })
    return BenchReport(
        seed=folds.seed,
        timeout=T,
        cores=cores,
        folds=folds,
        portfolio=kb.portfolio,
        aggregate=aggregate,
        vbs_wins=wins,
        vps_members=vps_members,
        instances=instances,
    )
