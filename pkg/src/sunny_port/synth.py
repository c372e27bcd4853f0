"""Small synthetic knowledge bases: the four-solver worked example and seeded random ones."""

from __future__ import annotations

import numpy as np

from .kb import BoundedBehaviour, Direction, Kind, KnowledgeBase, Outcome, ProblemInstance, SolverRecord

WORKED_TIMEOUT = 1800.0
# solving times of s1..s4 on p1..p4; None = timeout
WORKED_RUNTIMES = {
    "s1": {"p1": None, "p2": 3.0, "p3": None, "p4": 278.0},
    "s2": {"p1": 593.0, "p2": None, "p3": None, "p4": None},
    "s3": {"p1": None, "p2": 36.0, "p3": 1452.0, "p4": None},
    "s4": {"p1": None, "p2": None, "p3": 122.0, "p4": 60.0},
}
WORKED_FEATURES = {"p1": (0.0, 0.0), "p2": (1.0, 0.0), "p3": (0.0, 1.0), "p4": (1.0, 1.0)}


def csp_record(solver: str, time: float | None, timeout: float) -> SolverRecord:
    if time is None:
        return SolverRecord(solver, Outcome.UNK, timeout)
    return SolverRecord(solver, Outcome.SAT, time)


def worked_example_kb(copies: int = 1, features: dict | None = None) -> KnowledgeBase:
    """The 4x4 runtime matrix; with ``copies > 1`` instance ids get a ``cNN_`` prefix."""
    features = features or WORKED_FEATURES
    insts, recs = [], {}
    for c in range(copies):
        for p, feats in features.items():
            pid = p if copies == 1 else f"c{c:02d}_{p}"
            insts.append(ProblemInstance(pid, Kind.CSP, Direction.NONE, tuple(feats)))
            for s, row in WORKED_RUNTIMES.items():
                recs[(pid, s)] = csp_record(s, row[p], WORKED_TIMEOUT)
    return KnowledgeBase.build(insts, recs, list(WORKED_RUNTIMES), WORKED_TIMEOUT)


def rcpsp_like_kb(solver_b_first: float = 1.46, proof_after_restart: float = 0.05) -> KnowledgeBase:
    """Two solvers on one minimization instance, neither proving optimality alone.

    ``A`` reaches the optimum 958 at 2.42 s.  ``B`` stalls at 959 (found at
    ``solver_b_first`` s) but proves optimality ``proof_after_restart`` s
    after being restarted with bound 958.
    """
    T = 1800.0
    inst = ProblemInstance("rcpsp", Kind.COP, Direction.MINIMIZE, (0.0,))
    recs = {
        ("rcpsp", "A"): SolverRecord("A", Outcome.SAT, T, ((0.9, 1012.0), (2.42, 958.0))),
        ("rcpsp", "B"): SolverRecord(
            "B",
            Outcome.SAT,
            T,
            ((solver_b_first, 959.0),),
            BoundedBehaviour(958.0, Outcome.UNS, proof_after_restart),
        ),
    }
    return KnowledgeBase.build([inst], recs, ["A", "B"], T)


def random_csp_kb(
    seed: int,
    n_solvers: int = 8,
    n_instances: int = 50,
    n_features: int = 4,
    timeout: float = 1800.0,
    n_clusters: int = 4,
) -> KnowledgeBase:
    """Instances drawn around cluster centres; each solver is strong on some clusters."""
    rng = np.random.default_rng(seed)
    solvers = [f"s{i + 1}" for i in range(n_solvers)]
    centres = rng.normal(0.0, 3.0, size=(n_clusters, n_features))
    skill = rng.uniform(0.05, 0.95, size=(n_solvers, n_clusters))
    speed = rng.uniform(0.5, 3.0, size=n_solvers)
    insts, recs = [], {}
    for j in range(n_instances):
        cl = int(rng.integers(n_clusters))
        feats = centres[cl] + rng.normal(0.0, 1.0, size=n_features)
        pid = f"i{j:03d}"
        insts.append(ProblemInstance(pid, Kind.CSP, Direction.NONE, tuple(float(f) for f in feats)))
        satisfiable = rng.random() < 0.7
        for i, s in enumerate(solvers):
            if rng.random() < skill[i, cl]:
                t = float(np.exp(rng.uniform(0.0, np.log(timeout))) / speed[i])
                t = round(min(t, timeout * 0.999), 3)
                outcome = Outcome.SAT if satisfiable else Outcome.UNS
                recs[(pid, s)] = SolverRecord(s, outcome, max(t, 0.001))
            else:
                recs[(pid, s)] = SolverRecord(s, Outcome.UNK, timeout)
    return KnowledgeBase.build(insts, recs, solvers, timeout)


def random_trace(rng: np.random.Generator, start: float, floor: float, horizon: float, n: int):
    """At most ``n`` strictly decreasing values from about ``start`` down to ``floor``."""
    times = np.sort(rng.uniform(0.0, horizon, size=n))
    times = np.unique(np.round(times, 3))
    gaps = np.sort(rng.uniform(0.0, 1.0, size=len(times)))[::-1]
    values = floor + np.round(gaps * (start - floor)).astype(float)
    values = np.unique(values)[::-1]
    k = min(len(times), len(values))
    return tuple(zip(times[:k].tolist(), values[:k].tolist()))


def random_cop_kb(
    seed: int,
    n_solvers: int = 6,
    n_instances: int = 40,
    n_features: int = 3,
    timeout: float = 1800.0,
) -> KnowledgeBase:
    rng = np.random.default_rng(seed)
    solvers = [f"s{i + 1}" for i in range(n_solvers)]
    quality = rng.uniform(0.1, 0.9, size=n_solvers)
    insts, recs = [], {}
    for j in range(n_instances):
        pid = f"o{j:03d}"
        direction = Direction.MINIMIZE if rng.random() < 0.7 else Direction.MAXIMIZE
        feats = tuple(float(x) for x in rng.normal(0.0, 2.0, size=n_features))
        insts.append(ProblemInstance(pid, Kind.COP, direction, feats))
        optimum = float(rng.integers(50, 500))
        for i, s in enumerate(solvers):
            r = rng.random()
            if r > 0.85 + 0.1 * quality[i]:
                recs[(pid, s)] = SolverRecord(s, Outcome.UNK, timeout)
                continue
            n = int(rng.integers(1, 6))
            reach = optimum if rng.random() < quality[i] else optimum + float(rng.integers(1, 40))
            horizon = float(np.exp(rng.uniform(0.0, np.log(timeout * 0.9))))
            trace = random_trace(rng, reach + 200.0, reach, horizon, n)
            if direction is Direction.MAXIMIZE:
                # mirror so that values increase towards the optimum
                trace = tuple((t, 2000.0 - v) for t, v in trace)
            proves = reach == optimum and rng.random() < quality[i]
            if proves:
                t_proof = round(min(trace[-1][0] + float(rng.uniform(0.0, timeout)), timeout * 0.999), 3)
                recs[(pid, s)] = SolverRecord(s, Outcome.OPT, max(t_proof, trace[-1][0]), trace)
            else:
                recs[(pid, s)] = SolverRecord(s, Outcome.SAT, timeout, trace)
    return KnowledgeBase.build(insts, recs, solvers, timeout)
