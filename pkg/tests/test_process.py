"""Process backend: the MiniZinc output convention, driven by a scripted fake solver."""

import json
import sys
import time
from pathlib import Path

import pytest

from sunny_port.executor import (
    Capabilities,
    Engine,
    ExecutorConfig,
    ProcessAdapter,
    WallClock,
    build_command,
    load_registry,
    parse_output,
    solve,
)
from sunny_port.executor.adapters import adapters_from_mapping
from sunny_port.kb import Direction, Kind, KnowledgeBase, Outcome, ProblemInstance, SolverRecord
from sunny_port.scheduler import ParallelSchedule, Schedule

FAKE = str(Path(__file__).with_name("fake_solver.py"))


def test_parse_output_protocol():
    evs = parse_output(["% obj = 12", "----------", "objective = 9;", "----------", "=========="])
    assert [(e.kind, e.value, e.status) for e in evs] == [
        ("solution", 12.0, None), ("solution", 9.0, None), ("complete", None, "search-complete"),
    ]
    assert [e.status for e in parse_output(["=====UNSATISFIABLE====="])] == ["uns"]
    assert [e.status for e in parse_output(["=====UNBOUNDED====="])] == ["unb"]
    assert [e.kind for e in parse_output(["=====ERROR====="])] == ["fail"]
    assert parse_output(["=====UNKNOWN====="]) == []
    assert [e.value for e in parse_output(["cost: 7", "----------"], obj_pattern=r"cost: (\d+)")] == [7.0]


def test_build_command():
    tpl = ["solver", "{instance}", "--bound={obj_bound}"]
    assert build_command(tpl, "m.mzn", None) == ["solver", "m.mzn"]
    assert build_command(tpl, "m.mzn", 958.0, ["-p", "1"], ["-f"]) == ["solver", "m.mzn", "--bound=958", "-p", "1", "-f"]
    assert build_command(tpl, "m.mzn", 2.5) == ["solver", "m.mzn", "--bound=2.5"]


def test_adapter_template_invariants():
    with pytest.raises(ValueError, match="instance"):
        ProcessAdapter("x", command=["solver"], capabilities=Capabilities(supports_bound_injection=False))
    with pytest.raises(ValueError, match="obj_bound"):
        ProcessAdapter("x", command=["solver", "{instance}"])
    with pytest.raises(ValueError, match="obj_bound"):
        ProcessAdapter("x", command=["s", "{instance}", "{obj_bound}"], capabilities=Capabilities(True, False))


def test_registry(tmp_path):
    reg = tmp_path / "solvers.toml"
    reg.write_text(
        '[solvers.gecode]\ncommand = "fzn-gecode {instance} --bound={obj_bound}"\nrestart_time = 3\n'
        '[solvers.chuffed]\ncommand = ["fzn-chuffed", "{instance}"]\npause = false\noptions = "-f"\n'
    )
    ads = load_registry(reg)
    assert ads["gecode"].capabilities.supports_bound_injection and ads["gecode"].restart_time == 3
    assert not ads["chuffed"].capabilities.supports_bound_injection
    assert not ads["chuffed"].capabilities.supports_pause_resume
    assert list(ads["chuffed"].options) == ["-f"]
    with pytest.raises(ValueError, match="unknown keys"):
        adapters_from_mapping({"x": {"command": "a {instance}", "colour": 1}})
    bad = tmp_path / "empty.toml"
    bad.write_text("")
    with pytest.raises(ValueError):
        load_registry(bad)


# --- live processes -----------------------------------------------------------------------

def scenario(tmp_path, name, steps, **extra):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps({"steps": steps, **extra}))
    return str(path)


def adapter(sid, bound=False, pause=True):
    cmd = [sys.executable, FAKE, "{instance}"] + (["--bound={obj_bound}"] if bound else [])
    return ProcessAdapter(sid, Capabilities(pause, bound), command=cmd)


def kb_for(kind, solvers, T=30.0):
    direction = Direction.NONE if kind is Kind.CSP else Direction.MINIMIZE
    inst = ProblemInstance("train", kind, direction, (0.0,))
    recs = {("train", s): SolverRecord(s, Outcome.UNK, T) for s in solvers}
    return KnowledgeBase.build([inst], recs, solvers, T)


def run_single(tmp_path, kind, steps, **extra):
    path = scenario(tmp_path, "one", steps, **extra)
    direction = Direction.NONE if kind is Kind.CSP else Direction.MINIMIZE
    problem = ProblemInstance(path, kind, direction, (0.0,))
    return solve(problem, ExecutorConfig(cores=1, timeout=30.0), kb_for(kind, ["fake"]), {"fake": adapter("fake")})


def test_process_sat(tmp_path):
    res = run_single(tmp_path, Kind.CSP, [[0.05, "x = 1;"], [0, "----------"]], hang=True)
    assert (res.outcome, res.winner) == (Outcome.SAT, "fake")


def test_process_opt(tmp_path):
    steps = [[0.02, "% obj = 12"], [0, "----------"], [0.02, "% obj = 9"], [0, "----------"], [0.02, "=========="]]
    res = run_single(tmp_path, Kind.COP, steps)
    assert (res.outcome, res.best_bound, res.winner) == (Outcome.OPT, 9.0, "fake")
    assert [e.value for e in res.events if e.event == "bound"] == [12.0, 9.0]


def test_process_uns(tmp_path):
    res = run_single(tmp_path, Kind.CSP, [[0.02, "=====UNSATISFIABLE====="]])
    assert (res.outcome, res.winner) == (Outcome.UNS, "fake")


def test_process_unbounded(tmp_path):
    res = run_single(tmp_path, Kind.COP, [[0.02, "=====UNBOUNDED====="]])
    assert res.outcome is Outcome.UNB


def test_process_crash_is_discarded(tmp_path):
    res = run_single(tmp_path, Kind.CSP, [[0.02, "garbage"]], exit=1)
    assert res.outcome is Outcome.UNK
    assert [e.event for e in res.events if e.solver == "fake"][-2:] == ["fail", "discard"]


def test_process_suspend_resume_freezes_progress(tmp_path):
    a = scenario(tmp_path, "a", [[0.5, "----------"]], hang=True)
    b = scenario(tmp_path, "b", [], hang=True)
    ads = {
        "a": ProcessAdapter("a", Capabilities(True, False), command=[sys.executable, FAKE, a, "{instance}"]),
        "b": ProcessAdapter("b", Capabilities(True, False), command=[sys.executable, FAKE, b, "{instance}"]),
    }
    problem = ProblemInstance("unused", Kind.CSP, Direction.NONE, (0.0,))
    # without anytime b's slot really ends, and the idle core falls back to resuming a
    cfg = ExecutorConfig(cores=1, timeout=30.0, anytime=False)
    eng = Engine(problem, cfg, kb_for(Kind.CSP, ["a", "b"]), ads, WallClock(0.02))
    t0 = time.monotonic()
    res = eng.run_schedule(ParallelSchedule((Schedule((("a", 0.3), ("b", 0.3))),)))
    wall = time.monotonic() - t0
    seq = [(e.event, e.solver) for e in res.events if e.event in ("start", "suspend", "resume", "solution", "end")]
    assert seq == [
        ("start", "a"), ("suspend", "a"), ("start", "b"), ("suspend", "b"),
        ("resume", "a"), ("solution", "a"), ("end", "a"),
    ]
    assert res.outcome is Outcome.SAT
    # a needs 0.5 s of CPU; 0.3 s of b's slot passed while a was stopped
    assert wall > 0.75


def test_process_restart_with_bound_proves_optimality(tmp_path):
    a = scenario(tmp_path, "a", [[0.05, "% obj = 958"], [0, "----------"]], hang=True)
    b = scenario(tmp_path, "b", [[0.02, "% obj = 959"], [0, "----------"]], hang=True,
                 bounded=[[0.02, "=====UNSATISFIABLE====="]])
    ads = {
        "a": ProcessAdapter("a", Capabilities(True, False), command=[sys.executable, FAKE, a, "{instance}"]),
        "b": ProcessAdapter("b", Capabilities(True, True),
                            command=[sys.executable, FAKE, b, "{instance}", "--bound={obj_bound}"]),
    }
    problem = ProblemInstance("unused", Kind.COP, Direction.MINIMIZE, (0.0,))
    cfg = ExecutorConfig(cores=2, timeout=30.0, restart_time=0.4)
    res = solve(problem, cfg, kb_for(Kind.COP, ["a", "b"]), ads)
    assert (res.outcome, res.best_bound, res.winner) == (Outcome.OPT, 958.0, "b")
    assert [(e.solver, e.value) for e in res.events if e.event == "restart"] == [("b", 958.0)]
