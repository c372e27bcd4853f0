"""Knowledge base: instances, per-solver runtime records and k-NN lookup.

A knowledge base is read from two CSV files.  ``instances.csv`` holds one
row per known instance::

    id,kind,direction,f1,...,fm
    p1,csp,none,3.0,12.5

``runtimes.csv`` starts with a ``#timeout=<T>`` line followed by one row per
(instance, solver) pair::

    instance_id,solver_id,outcome,time_s,trace[,trace_with_bound]
    p1,gecode,sat,1800,0.52:120;3.1:118

``trace`` is a ``;``-separated list of ``t:v`` pairs.  The optional
``trace_with_bound`` column describes how a solver behaves once it is
restarted with an objective bound at least as good as a threshold:
``<bound>@<outcome>@<time_s>@<trace>``, times relative to the restart.
"""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

DEFAULT_K = 70


class KBError(ValueError):
    """Base class for knowledge-base loading problems."""


class KBParseError(KBError):
    def __init__(self, message: str, path: str | Path | None = None, line: int | None = None):
        where = ""
        if path is not None:
            where = f"{path}"
            if line is not None:
                where += f":{line}"
            where += ": "
        super().__init__(where + message)
        self.path = path
        self.line = line


class KBCompletenessError(KBError):
    def __init__(self, missing: Sequence[tuple[str, str]]):
        self.missing = list(missing)
        shown = ", ".join(f"({i}, {s})" for i, s in self.missing[:5])
        more = "" if len(self.missing) <= 5 else f" and {len(self.missing) - 5} more"
        super().__init__(f"missing runtime records for {shown}{more}")


class KBValidationError(KBError):
    pass


class Kind(enum.Enum):
    CSP = "csp"
    COP = "cop"


class Direction(enum.Enum):
    MINIMIZE = "min"
    MAXIMIZE = "max"
    NONE = "none"

    def better(self, a: float, b: float) -> bool:
        """True iff objective value ``a`` is strictly better than ``b``."""
        if self is Direction.MINIMIZE:
            return a < b
        if self is Direction.MAXIMIZE:
            return a > b
        raise ValueError("satisfaction problems have no objective")

    def best(self, values: Iterable[float]) -> float:
        return min(values) if self is Direction.MINIMIZE else max(values)

    def worst(self, values: Iterable[float]) -> float:
        return max(values) if self is Direction.MINIMIZE else min(values)


class Outcome(enum.Enum):
    SAT = "sat"
    UNS = "uns"
    UNK = "unk"
    OPT = "opt"
    UNB = "unb"

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class ProblemInstance:
    id: str
    kind: Kind
    direction: Direction
    features: tuple[float, ...]

    def __post_init__(self):
        if (self.direction is Direction.NONE) != (self.kind is Kind.CSP):
            raise KBValidationError(
                f"instance {self.id}: direction {self.direction.value} does not match kind {self.kind.value}"
            )


Trace = tuple[tuple[float, float], ...]


@dataclass(frozen=True)
class BoundedBehaviour:
    """What a solver does after a restart with a bound at least as good as ``bound``."""

    bound: float
    outcome: Outcome
    time_s: float
    trace: Trace = ()


@dataclass(frozen=True)
class SolverRecord:
    solver_id: str
    outcome: Outcome
    time_s: float
    trace: Trace = ()
    with_bound: BoundedBehaviour | None = None

    @property
    def best_value(self) -> float | None:
        return self.trace[-1][1] if self.trace else None


@dataclass(frozen=True)
class Neighbourhood:
    query: str
    neighbours: tuple[str, ...]
    distances: tuple[float, ...] = ()

    def __len__(self) -> int:
        return len(self.neighbours)

    def __iter__(self):
        return iter(self.neighbours)


def _check_trace(trace: Trace, direction: Direction, where: str) -> None:
    for (t0, v0), (t1, v1) in zip(trace, trace[1:]):
        if not t1 > t0:
            raise KBValidationError(f"{where}: trace times not strictly increasing ({t0} then {t1})")
        if not direction.better(v1, v0):
            raise KBValidationError(
                f"{where}: trace values must strictly improve ({direction.value}imize): {v0} then {v1}"
            )
    if any(t < 0 for t, _ in trace):
        raise KBValidationError(f"{where}: negative trace time")


def validate_record(rec: SolverRecord, inst: ProblemInstance, timeout: float) -> None:
    where = f"record ({inst.id}, {rec.solver_id})"
    if not 0 <= rec.time_s <= timeout:
        raise KBValidationError(f"{where}: time {rec.time_s} outside [0, {timeout}]")
    if rec.outcome in (Outcome.OPT, Outcome.UNS, Outcome.UNB) and not rec.time_s < timeout:
        raise KBValidationError(f"{where}: outcome {rec.outcome} requires time < T")
    if rec.outcome is Outcome.UNK and rec.time_s != timeout:
        raise KBValidationError(f"{where}: outcome UNK requires time = T")
    if inst.kind is Kind.CSP:
        if rec.outcome in (Outcome.OPT, Outcome.UNB):
            raise KBValidationError(f"{where}: outcome {rec.outcome} is not valid for a CSP")
        if rec.outcome is Outcome.SAT and not rec.time_s < timeout:
            raise KBValidationError(f"{where}: CSP outcome SAT requires time < T")
        if rec.trace or rec.with_bound:
            raise KBValidationError(f"{where}: CSP records carry no objective trace")
        return
    if rec.outcome in (Outcome.UNK, Outcome.UNS, Outcome.UNB) and rec.trace:
        raise KBValidationError(f"{where}: outcome {rec.outcome} cannot carry solutions")
    if rec.outcome in (Outcome.SAT, Outcome.OPT) and not rec.trace:
        raise KBValidationError(f"{where}: outcome {rec.outcome} needs at least one solution")
    _check_trace(rec.trace, inst.direction, where)
    if rec.trace and rec.trace[-1][0] > timeout:
        raise KBValidationError(f"{where}: trace extends past T")
    if rec.outcome is Outcome.OPT and rec.trace[-1][0] > rec.time_s:
        raise KBValidationError(f"{where}: solution reported after the optimality proof")
    wb = rec.with_bound
    if wb is not None:
        _check_trace(wb.trace, inst.direction, where + " (with bound)")
        if any(not inst.direction.better(v, wb.bound) for _, v in wb.trace):
            raise KBValidationError(f"{where}: bounded trace must improve on its bound")


@dataclass(frozen=True)
class KnowledgeBase:
    instances: dict[str, ProblemInstance]
    records: dict[tuple[str, str], SolverRecord]
    portfolio: tuple[str, ...]
    timeout: float
    n_features: int
    feature_min: np.ndarray = field(repr=False, compare=False)
    feature_max: np.ndarray = field(repr=False, compare=False)
    _matrix: np.ndarray = field(repr=False, compare=False)
    _ids: tuple[str, ...] = field(repr=False, compare=False)

    @classmethod
    def build(
        cls,
        instances: Iterable[ProblemInstance],
        records: dict[tuple[str, str], SolverRecord],
        portfolio: Sequence[str],
        timeout: float,
        n_features: int | None = None,
    ) -> "KnowledgeBase":
        insts = {p.id: p for p in sorted(instances, key=lambda p: p.id)}
        if not insts:
            raise KBValidationError("knowledge base has no instances")
        if timeout <= 0:
            raise KBValidationError("timeout must be positive")
        if n_features is None:
            n_features = len(next(iter(insts.values())).features)
        for p in insts.values():
            if len(p.features) != n_features:
                raise KBValidationError(
                    f"instance {p.id}: {len(p.features)} features, expected {n_features}"
                )
        portfolio = tuple(portfolio)
        if len(set(portfolio)) != len(portfolio):
            raise KBValidationError("duplicate solver ids in portfolio")
        missing = [(i, s) for i in insts for s in portfolio if (i, s) not in records]
        if missing:
            raise KBCompletenessError(missing)
        kept = {}
        for i in insts:
            for s in portfolio:
                rec = records[(i, s)]
                validate_record(rec, insts[i], timeout)
                kept[(i, s)] = rec
        ids = tuple(insts)
        raw = np.array([insts[i].features for i in ids], dtype=float).reshape(len(ids), n_features)
        lo = raw.min(axis=0)
        hi = raw.max(axis=0)
        kb = cls(insts, kept, portfolio, float(timeout), n_features, lo, hi, np.empty(0), ids)
        object.__setattr__(kb, "_matrix", kb._normalize_rows(raw))
        return kb

    @property
    def active_features(self) -> np.ndarray:
        """Mask of features that vary across the training set."""
        return self.feature_max > self.feature_min

    @property
    def constant_features(self) -> list[int]:
        return [i for i, a in enumerate(self.active_features) if not a]

    def record(self, instance_id: str, solver_id: str) -> SolverRecord:
        return self.records[(instance_id, solver_id)]

    def without(self, instance_ids: Iterable[str]) -> "KnowledgeBase":
        """A new knowledge base (own normalization) with the given instances removed."""
        drop = set(instance_ids)
        keep = [p for i, p in self.instances.items() if i not in drop]
        recs = {key: r for key, r in self.records.items() if key[0] not in drop}
        return KnowledgeBase.build(keep, recs, self.portfolio, self.timeout, self.n_features)

    def restrict(self, instance_ids: Iterable[str]) -> "KnowledgeBase":
        keep = set(instance_ids)
        return self.without(i for i in self.instances if i not in keep)

    def _normalize_rows(self, raw: np.ndarray) -> np.ndarray:
        active = self.active_features
        lo = self.feature_min[active]
        span = self.feature_max[active] - lo
        scaled = 2.0 * (raw[:, active] - lo) / span - 1.0
        return np.clip(scaled, -1.0, 1.0)

    def normalize(self, features: Sequence[float]) -> np.ndarray:
        return normalize(features, self)

    def summary(self) -> str:
        return f"{len(self.instances)} instances, {len(self.portfolio)} solvers, T={self.timeout:g}"


def normalize(features: Sequence[float], kb: KnowledgeBase) -> np.ndarray:
    """Min-max scale to [-1, 1] against the training set; constant features are dropped."""
    vec = np.asarray(features, dtype=float)
    if vec.shape != (kb.n_features,):
        raise ValueError(f"expected {kb.n_features} features, got {vec.size}")
    return kb._normalize_rows(vec.reshape(1, -1))[0]


def distance(x: np.ndarray, y: np.ndarray) -> float:
    return float(np.sqrt(np.sum((np.asarray(x) - np.asarray(y)) ** 2)))


def neighbours(
    p: ProblemInstance, kb: KnowledgeBase, k: int = DEFAULT_K, same_kind: bool = True
) -> Neighbourhood:
    """The ``k`` training instances closest to ``p``; ties broken by instance id."""
    if k < 1:
        raise ValueError("k must be at least 1")
    query = normalize(p.features, kb)
    ids = kb._ids
    rows = kb._matrix
    if same_kind:
        mask = np.array([kb.instances[i].kind is p.kind for i in ids], dtype=bool)
        ids = tuple(i for i, m in zip(ids, mask) if m)
        rows = rows[mask]
    if not ids:
        return Neighbourhood(p.id, (), ())
    dist = np.sqrt(np.sum((rows - query) ** 2, axis=1))
    # ids are already sorted, so a stable sort on distance breaks ties by id
    order = np.argsort(dist, kind="stable")[:k]
    return Neighbourhood(p.id, tuple(ids[j] for j in order), tuple(float(dist[j]) for j in order))


# --- CSV I/O -----------------------------------------------------------------

def _parse_float(text: str, path, line: int, what: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise KBParseError(f"bad {what} {text!r}", path, line) from None
    if not math.isfinite(value):
        raise KBParseError(f"non-finite {what} {text!r}", path, line)
    return value


def parse_trace(text: str, path=None, line: int | None = None) -> Trace:
    text = text.strip()
    if not text:
        return ()
    pairs = []
    for chunk in text.split(";"):
        chunk = chunk.strip()
        if not chunk:
            continue
        t, sep, v = chunk.partition(":")
        if not sep:
            raise KBParseError(f"bad trace entry {chunk!r} (expected t:v)", path, line)
        pairs.append((_parse_float(t, path, line, "trace time"), _parse_float(v, path, line, "trace value")))
    return tuple(pairs)


def fmt_num(x: float) -> str:
    text = repr(float(x))
    return text[:-2] if text.endswith(".0") else text


def format_trace(trace: Trace) -> str:
    return ";".join(f"{fmt_num(t)}:{fmt_num(v)}" for t, v in trace)


def _parse_outcome(text: str, path, line) -> Outcome:
    try:
        return Outcome(text.strip().lower())
    except ValueError:
        raise KBParseError(f"unknown outcome {text!r}", path, line) from None


def _parse_bounded(text: str, path, line) -> BoundedBehaviour | None:
    text = text.strip()
    if not text:
        return None
    parts = text.split("@")
    if len(parts) != 4:
        raise KBParseError(f"bad trace_with_bound {text!r}", path, line)
    return BoundedBehaviour(
        bound=_parse_float(parts[0], path, line, "bound"),
        outcome=_parse_outcome(parts[1], path, line),
        time_s=_parse_float(parts[2], path, line, "time"),
        trace=parse_trace(parts[3], path, line),
    )


def read_instances(path: str | Path) -> list[ProblemInstance]:
    path = Path(path)
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header[:3]] != ["id", "kind", "direction"]:
            raise KBParseError("expected header id,kind,direction,f1,...", path, 1)
        width = len(header)
        seen = set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != width:
                raise KBParseError(f"expected {width} fields, got {len(row)}", path, line)
            pid = row[0].strip()
            if not pid:
                raise KBParseError("empty instance id", path, line)
            if pid in seen:
                raise KBParseError(f"duplicate instance id {pid!r}", path, line)
            seen.add(pid)
            try:
                kind = Kind(row[1].strip().lower())
                direction = Direction(row[2].strip().lower())
            except ValueError as exc:
                raise KBParseError(str(exc), path, line) from None
            feats = tuple(_parse_float(c, path, line, "feature") for c in row[3:])
            try:
                out.append(ProblemInstance(pid, kind, direction, feats))
            except KBValidationError as exc:
                raise KBParseError(str(exc), path, line) from None
    if not out:
        raise KBParseError("no instances", path)
    return out


def read_runtimes(path: str | Path) -> tuple[float, list[tuple[str, SolverRecord]]]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        first = fh.readline()
        if not first.startswith("#timeout="):
            raise KBParseError("first line must be #timeout=<T>", path, 1)
        timeout = _parse_float(first.strip()[len("#timeout="):], path, 1, "timeout")
        if timeout <= 0:
            raise KBParseError("timeout must be positive", path, 1)
        reader = csv.reader(fh)
        rows = []
        for row in reader:
            line = reader.line_num + 1
            if not row or all(not c.strip() for c in row):
                continue
            if row[0].strip() == "instance_id":
                continue
            if len(row) not in (5, 6):
                raise KBParseError(f"expected 5 or 6 fields, got {len(row)}", path, line)
            inst, solver = row[0].strip(), row[1].strip()
            if not inst or not solver:
                raise KBParseError("empty instance or solver id", path, line)
            rec = SolverRecord(
                solver_id=solver,
                outcome=_parse_outcome(row[2], path, line),
                time_s=_parse_float(row[3], path, line, "time"),
                trace=parse_trace(row[4], path, line),
                with_bound=_parse_bounded(row[5], path, line) if len(row) == 6 else None,
            )
            rows.append((inst, rec, line))
    return timeout, rows


def load_kb(instances_path: str | Path, runtimes_path: str | Path) -> KnowledgeBase:
    instances = read_instances(instances_path)
    timeout, rows = read_runtimes(runtimes_path)
    by_id = {p.id: p for p in instances}
    records: dict[tuple[str, str], SolverRecord] = {}
    portfolio: list[str] = []
    for inst, rec, line in rows:
        if inst not in by_id:
            raise KBParseError(f"unknown instance {inst!r}", runtimes_path, line)
        if (inst, rec.solver_id) in records:
            raise KBParseError(f"duplicate record ({inst}, {rec.solver_id})", runtimes_path, line)
        try:
            validate_record(rec, by_id[inst], timeout)
        except KBValidationError as exc:
            raise KBValidationError(f"{runtimes_path}:{line}: {exc}") from None
        records[(inst, rec.solver_id)] = rec
        if rec.solver_id not in portfolio:
            portfolio.append(rec.solver_id)
    if not portfolio:
        raise KBParseError("no runtime records", runtimes_path)
    return KnowledgeBase.build(instances, records, portfolio, timeout)


def load_kb_dir(directory: str | Path) -> KnowledgeBase:
    directory = Path(directory)
    return load_kb(directory / "instances.csv", directory / "runtimes.csv")


def write_kb(kb: KnowledgeBase, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "instances.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "kind", "direction"] + [f"f{i + 1}" for i in range(kb.n_features)])
        for p in kb.instances.values():
            w.writerow([p.id, p.kind.value, p.direction.value] + [fmt_num(f) for f in p.features])
    with_bound = any(r.with_bound for r in kb.records.values())
    with open(directory / "runtimes.csv", "w", newline="", encoding="utf-8") as fh:
        fh.write(f"#timeout={fmt_num(kb.timeout)}\n")
        w = csv.writer(fh)
        header = ["instance_id", "solver_id", "outcome", "time_s", "trace"]
        w.writerow(header + (["trace_with_bound"] if with_bound else []))
        for i in kb.instances:
            for s in kb.portfolio:
                r = kb.records[(i, s)]
                row = [i, s, r.outcome.value, fmt_num(r.time_s), format_trace(r.trace)]
                if with_bound:
                    wb = r.with_bound
                    row.append(
                        "" if wb is None
                        else f"{fmt_num(wb.bound)}@{wb.outcome.value}@{fmt_num(wb.time_s)}@{format_trace(wb.trace)}"
                    )
                w.writerow(row)
