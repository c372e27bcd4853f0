import math

import numpy as np
from hypothesis import given, settings, strategies as st

from oracles import parallelise_by_definition, quality, sunny_csp_bruteforce
from sunny_port.executor import ExecutorConfig, replay_adapters, solve
from sunny_port.kb import Direction, Kind, KnowledgeBase, Neighbourhood, Outcome, ProblemInstance, SolverRecord, neighbours
from sunny_port.metrics import InstanceBounds, RunReport, eval_area, eval_score
from sunny_port.scheduler import BUDGET_TOL, Schedule, parallelise, sunny_schedule_csp
from sunny_port.synth import random_cop_kb, random_csp_kb

T = 100.0


@st.composite
def runtime_matrix(draw):
    n_s = draw(st.integers(1, 5))
    n_i = draw(st.integers(1, 6))
    cell = st.one_of(st.none(), st.integers(1, 99).map(float))
    return {f"s{a}": {f"p{b}": draw(cell) for b in range(n_i)} for a in range(n_s)}


def kb_from_matrix(times, feats=None):
    insts = sorted(next(iter(times.values())))
    pis = [ProblemInstance(p, Kind.CSP, Direction.NONE, (float(n), 0.0) if feats is None else feats[p]) for n, p in enumerate(insts)]
    recs = {}
    for s, row in times.items():
        for p, t in row.items():
            recs[(p, s)] = SolverRecord(s, Outcome.UNK, T) if t is None else SolverRecord(s, Outcome.SAT, t)
    return KnowledgeBase.build(pis, recs, sorted(times), T)


@st.composite
def sigmas(draw):
    n = draw(st.integers(1, 8))
    w = draw(st.lists(st.integers(1, 50), min_size=n, max_size=n))
    total = sum(w)
    return Schedule(tuple((f"s{i}", T * x / total) for i, x in enumerate(w)))


@given(runtime_matrix())
def test_csp_schedule_matches_bruteforce(times):
    kb = kb_from_matrix(times)
    nbh = Neighbourhood("q", tuple(kb.instances))
    got = sunny_schedule_csp(nbh, kb, T)
    want = sunny_csp_bruteforce(times, T, T)
    if not want:
        # nothing solves anything: all slots go to the backup solver
        assert len(got) == 1 and got.total == T
        return
    assert [s for s, _ in got] == [s for s, _ in want]
    for (_, a), (_, b) in zip(got, want):
        assert math.isclose(a, b)


@given(runtime_matrix(), st.floats(1.0, 1000.0))
def test_csp_schedule_budget_and_coverage(times, budget):
    kb = kb_from_matrix(times)
    nbh = Neighbourhood("q", tuple(kb.instances))
    sigma = sunny_schedule_csp(nbh, kb, budget)
    assert abs(sigma.total - budget) <= BUDGET_TOL
    solvable = {p for row in times.values() for p, t in row.items() if t is not None}
    covered = {p for s in sigma.solvers for p, t in times[s].items() if t is not None}
    assert covered == solvable


@given(sigmas(), st.integers(1, 10))
def test_parallelise_invariants(sigma, c):
    par = parallelise(sigma, c, T)
    assert par.cores == c
    assert sorted(par.solvers) == sorted(sigma.solvers)
    for sched in par.per_core:
        if sched:
            assert abs(sched.total - T) <= BUDGET_TOL
    for i in range(1, min(c, len(sigma) + 1)):
        if i < c:
            assert len(par.core(i)) == 1
    want = parallelise_by_definition(list(sigma), c, T)
    assert [[s for s, _ in core] for core in want] == [list(sch.solvers) for sch in par.per_core]
    # the stretched core keeps sigma's relative order
    last = par.core(c).solvers
    assert list(last) == [s for s in sigma.solvers if s in last]


@given(sigmas())
def test_parallelise_identity_on_one_core(sigma):
    par = parallelise(sigma, 1, T)
    assert par.core(1).solvers == sigma.solvers
    for (_, a), (_, b) in zip(par.core(1), sigma):
        assert math.isclose(a, b)


@given(st.integers(0, 10_000), st.integers(1, 40))
@settings(max_examples=30)
def test_neighbours_invariants(seed, k):
    kb = random_csp_kb(seed % 50, n_instances=25)
    rng = np.random.default_rng(seed)
    q = ProblemInstance("q", Kind.CSP, Direction.NONE, tuple(rng.normal(0, 3, size=4)))
    a = neighbours(q, kb, k)
    assert a == neighbours(q, kb, k)
    assert len(a) == min(k, len(kb.instances))
    assert list(a.distances) == sorted(a.distances)
    assert len(set(a.neighbours)) == len(a)
    rows = np.array([kb.normalize(kb.instances[i].features) for i in kb.instances])
    assert rows.min() >= -1 - 1e-9 and rows.max() <= 1 + 1e-9


@st.composite
def cop_run(draw):
    n = draw(st.integers(0, 6))
    times = sorted(set(draw(st.lists(st.integers(0, 99_999), min_size=n, max_size=n))))
    vals = sorted(set(draw(st.lists(st.integers(0, 1000), min_size=len(times), max_size=len(times)))), reverse=True)
    k = min(len(times), len(vals))
    trace = tuple((t / 1000, float(v)) for t, v in zip(times[:k], vals[:k]))
    proves = draw(st.booleans()) and bool(trace)
    proof = draw(st.integers(0, 120_000)) / 1000 if proves else T
    if proves:
        proof = max(proof, trace[-1][0])
    other = draw(st.lists(st.integers(-200, 1200), max_size=3))
    return trace, proves, proof, [float(o) for o in other]


@given(cop_run())
def test_score_and_area_ranges(run):
    trace, proves, proof, others = run
    rep = RunReport(Kind.COP, Direction.MINIMIZE, Outcome.OPT if proves else Outcome.SAT, proof, trace)
    values = [v for _, v in trace if _ < T] + others
    bounds = InstanceBounds("x", Direction.MINIMIZE, min(values) if values else None, max(values) if values else None)
    if not values:
        return
    s = eval_score(rep, bounds, T)
    a = eval_area(rep, bounds, T)
    assert s == 0.0 or s == 1.0 or 0.25 <= s <= 0.75
    assert 0.0 <= a <= T
    assert (a == T) == (s == 0.0)
    if s == 1.0:
        assert a <= proof + 1e-9


@given(st.integers(0, 300), st.integers(1, 8))
@settings(max_examples=25)
def test_replay_executor_invariants(seed, c):
    kb = random_cop_kb(seed, n_instances=12)
    pid = sorted(kb.instances)[seed % 12]
    train = kb.without([pid])
    res = solve(kb.instances[pid], ExecutorConfig(cores=c, timeout=kb.timeout), train, replay_adapters(kb))
    running, discarded, bound = set(), set(), None
    direction = kb.instances[pid].direction
    for e in res.events:
        if e.event in ("start", "resume"):
            assert e.solver not in discarded
            running.add(e.solver)
        elif e.event in ("suspend", "fail", "discard"):
            running.discard(e.solver)
            if e.event == "discard":
                discarded.add(e.solver)
        elif e.event == "bound":
            if bound is not None:
                assert direction.better(e.value, bound)
            bound = e.value
        assert len(running) <= c
    if res.outcome in (Outcome.SAT, Outcome.OPT):
        assert res.best_bound == bound
    else:
        assert bound is None


@given(st.floats(0, 1000), st.floats(0, 1000), st.floats(0, 1000))
def test_quality_oracle_range(v, a, b):
    best, worst = min(a, b), max(a, b)
    v = min(max(v, best), worst)
    assert 0.25 - 1e-12 <= quality(v, best, worst) <= 0.75 + 1e-12
