"""Scripted stand-in for a MiniZinc solver.

Usage: fake_solver.py SCENARIO.json [--bound=N]

The scenario holds ``steps``: ``[cpu_seconds, line]`` pairs printed after
burning that much CPU time (so SIGSTOP really freezes progress), an optional
``bounded`` step list used instead when a bound is passed, and ``exit``.
"""

import json
import sys
import time


def burn(seconds):
    end = time.process_time() + seconds
    while time.process_time() < end:
        pass


def main():
    scenario = json.load(open(sys.argv[1]))
    bound = None
    for arg in sys.argv[2:]:
        if arg.startswith("--bound="):
            bound = float(arg.split("=", 1)[1])
    steps = scenario["bounded"] if bound is not None and "bounded" in scenario else scenario["steps"]
    for delay, line in steps:
        burn(delay)
        print(line, flush=True)
    if scenario.get("hang"):
        time.sleep(3600)
    sys.exit(scenario.get("exit", 0))


if __name__ == "__main__":
    main()
