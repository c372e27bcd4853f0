import pytest

from sunny_port.bench import BenchError, FoldPlan, cross_validate, make_folds, simulate_run
from sunny_port.executor import ExecutorConfig
from sunny_port.kb import Direction, Kind, KnowledgeBase, Outcome, ProblemInstance, SolverRecord, neighbours
from sunny_port.scheduler import ParallelSchedule, Schedule, parallelise, sunny_schedule
from sunny_port.synth import random_cop_kb, random_csp_kb, worked_example_kb

SIGMA = Schedule((("s4", 720.0), ("s1", 720.0), ("s2", 360.0)))


def copy_folds(kb, copies=10):
    return FoldPlan(0, tuple(tuple(sorted(i for i in kb.instances if i.startswith(f"c{j:02d}_"))) for j in range(copies)))


def test_make_folds_shape_and_determinism():
    ids = [f"i{n:03d}" for n in range(47)]
    a, b = make_folds(ids, seed=3), make_folds(ids, seed=3)
    assert a == b
    assert len(a.folds) == 10
    assert sorted(x for f in a.folds for x in f) == ids
    sizes = [len(f) for f in a.folds]
    assert max(sizes) - min(sizes) <= 1
    assert make_folds(ids, seed=4) != a
    with pytest.raises(BenchError):
        make_folds(ids[:9])


def test_fold_plan_validation():
    with pytest.raises(BenchError):
        FoldPlan(0, (("a", "b"), ("b",)))
    with pytest.raises(BenchError):
        FoldPlan(0, (("a", "b", "c"), ("d",)))
    with pytest.raises(BenchError):
        FoldPlan(0, (("a",), ("b",))).check_covers(["a", "b", "c"])


def test_small_kb_rejected(worked_kb):
    with pytest.raises(BenchError):
        cross_validate(worked_kb)


def test_dominant_solver_gives_full_proven():
    insts = [ProblemInstance(f"p{i:02d}", Kind.CSP, Direction.NONE, (float(i), float(i % 3))) for i in range(20)]
    recs = {}
    for p in insts:
        recs[(p.id, "fast")] = SolverRecord("fast", Outcome.SAT, 0.01)
        recs[(p.id, "slow")] = SolverRecord("slow", Outcome.UNK, 100.0)
        recs[(p.id, "meh")] = SolverRecord("meh", Outcome.SAT, 50.0)
    kb = KnowledgeBase.build(insts, recs, ["fast", "slow", "meh"], 100.0)
    rep = cross_validate(kb, cores=(1, 2, 4, 8))
    for c in (1, 2, 4, 8):
        assert rep.aggregate[f"sunny({c})"]["proven"] == 100.0


def test_ten_copies_of_worked_example_reproduce_sigma():
    kb = worked_example_kb(copies=10)
    rep = cross_validate(kb, cores=(1,), cfg=ExecutorConfig(detection_cost_s=0.0), folds=copy_folds(kb))
    for inst in rep.instances:
        assert inst["schedules"]["sunny(1)"] == [SIGMA.to_json()]


def test_simulate_run_worked_example_p3(worked_kb):
    res = simulate_run("p3", ParallelSchedule((SIGMA,)), worked_kb, ExecutorConfig(detection_cost_s=0.0))
    assert (res.outcome, res.winner, res.wall_time_s) == (Outcome.SAT, "s4", 122.0)


def test_simulate_run_unk_single_solver(worked_kb):
    res = simulate_run("p1", ParallelSchedule((Schedule((("s1", 1800.0),)),)), worked_kb, ExecutorConfig(detection_cost_s=0.0))
    assert (res.outcome, res.wall_time_s) == (Outcome.UNK, 1800.0)


def test_simulate_run_cascade(cascade_kb):
    two = ParallelSchedule((Schedule((("A", 1800.0),)), Schedule((("B", 1800.0),))))
    res = simulate_run("rcpsp", two, cascade_kb, ExecutorConfig(cores=2))
    assert res.outcome is Outcome.OPT
    assert res.wall_time_s == pytest.approx(11.51)
    assert res.wall_time_s < 15


def test_simulate_run_gecode_like_timing():
    from sunny_port.synth import rcpsp_like_kb

    kb = rcpsp_like_kb(solver_b_first=3.31)
    two = ParallelSchedule((Schedule((("A", 1800.0),)), Schedule((("B", 1800.0),))))
    res = simulate_run("rcpsp", two, kb, ExecutorConfig(cores=2))
    assert res.outcome is Outcome.OPT and res.wall_time_s == pytest.approx(13.36)


def test_simulate_run_missing_record(worked_kb):
    with pytest.raises(BenchError):
        simulate_run("p1", ParallelSchedule((Schedule((("zz", 1800.0),)),)), worked_kb, ExecutorConfig())
    with pytest.raises(BenchError):
        simulate_run("nope", ParallelSchedule((SIGMA,)), worked_kb, ExecutorConfig())


def test_no_test_set_leakage():
    kb = random_csp_kb(5, n_instances=30)
    plan = make_folds(kb.instances, seed=1)
    for fold in plan.folds[:3]:
        train = kb.without(fold)
        for p in fold:
            base = neighbours(kb.instances[p], train, 70)
            for q in fold:
                if q != p:
                    assert neighbours(kb.instances[p], kb.without([q]).without(fold), 70) == base


def test_report_schedules_come_from_training_folds():
    kb = random_csp_kb(9, n_instances=20)
    rep = cross_validate(kb, cores=(2,), seed=2)
    T = kb.timeout
    for inst in rep.instances:
        fold = rep.folds.folds[inst["fold"]]
        train = kb.without(fold)
        sigma = sunny_schedule(neighbours(kb.instances[inst["id"]], train, 70), train, T - 5.0)
        assert inst["schedules"]["sunny(2)"] == parallelise(sigma, 2, T - 5.0).to_json()["cores"]


@pytest.mark.parametrize("make", [random_csp_kb, random_cop_kb])
def test_vps_vbs_identities_inside_report(make):
    kb = make(11)
    n = len(kb.portfolio)
    rep = cross_validate(kb, cores=(1, 2, n))
    for m in ("proven", "time", "score", "area"):
        if rep.aggregate["VBS"][m] is None:
            continue
        assert rep.aggregate[f"VPS({n})"][m] == pytest.approx(rep.aggregate["VBS"][m])
        best = rep.vps_members["VPS(1)"][m][0]
        assert rep.aggregate["VPS(1)"][m] == pytest.approx(rep.aggregate[best][m])
        for inst in rep.instances:
            row = inst["metrics"]
            if m not in row.get("VBS", {}):
                continue
            assert row[f"VPS({n})"][m] == pytest.approx(row["VBS"][m])
            vals = [row[s][m] for s in kb.portfolio]
            assert row["VBS"][m] == (max(vals) if m in ("proven", "score") else min(vals))


def test_report_determinism_and_jobs():
    kb = random_cop_kb(4, n_instances=20)
    a = cross_validate(kb, cores=(1, 2), seed=7)
    b = cross_validate(kb, cores=(1, 2), seed=7)
    c = cross_validate(kb, cores=(1, 2), seed=7, jobs=2)
    assert a.to_json() == b.to_json() == c.to_json()
    assert a.to_csv() == c.to_csv()


def test_csv_layout():
    rep = cross_validate(random_cop_kb(2, n_instances=20), cores=(1, 2, 4, 8))
    lines = rep.to_csv().splitlines()
    assert lines[0].split(",") == [
        "metric", "sunny(1)", "sunny(2)", "sunny(4)", "sunny(8)", "VPS(1)", "VPS(2)", "VPS(4)", "VPS(8)", "VBS",
    ]
    assert [l.split(",")[0] for l in lines[1:]] == ["proven (%)", "time (s)", "score x 100", "area (s)"]
    csp = cross_validate(random_csp_kb(2, n_instances=20), cores=(1,))
    assert [l.split(",")[0] for l in csp.to_csv().splitlines()[1:]] == ["proven (%)", "time (s)"]


def test_parallel_never_solves_fewer_small_sweep():
    for seed in range(5):
        kb = random_csp_kb(seed, n_instances=20)
        for pid, inst in kb.instances.items():
            train = kb.without([pid])
            sigma = sunny_schedule(neighbours(inst, train, 70), train, kb.timeout)
            base = simulate_run(pid, ParallelSchedule((sigma,)), kb, ExecutorConfig(detection_cost_s=0.0))
            for c in (2, 4, 8):
                par = simulate_run(pid, parallelise(sigma, c, kb.timeout), kb, ExecutorConfig(cores=c, detection_cost_s=0.0))
                if base.outcome in (Outcome.SAT, Outcome.UNS):
                    assert par.outcome in (Outcome.SAT, Outcome.UNS)


def test_parallel_time_dominance_counterexample():
    """Stretching the last core can delay a solver that sigma would have reached sooner."""
    T = 10.0
    insts = [ProblemInstance("p", Kind.CSP, Direction.NONE, (0.0,))]
    recs = {
        ("p", "a"): SolverRecord("a", Outcome.UNK, T),
        ("p", "b"): SolverRecord("b", Outcome.SAT, 0.5),
        ("p", "c"): SolverRecord("c", Outcome.UNK, T),
    }
    kb = KnowledgeBase.build(insts, recs, ["a", "b", "c"], T)
    sigma = Schedule((("a", 1.0), ("b", 1.0), ("c", 8.0)))
    seq = simulate_run("p", ParallelSchedule((sigma,)), kb, ExecutorConfig(timeout=T, detection_cost_s=0.0))
    par = simulate_run("p", parallelise(sigma, 2, T), kb, ExecutorConfig(cores=2, timeout=T, detection_cost_s=0.0))
    # sigma reaches b at 1; P(sigma,2) puts c alone on core 1 and a (5 s), b (5 s) on core 2
    assert seq.wall_time_s == 1.5
    assert par.wall_time_s == 5.5
