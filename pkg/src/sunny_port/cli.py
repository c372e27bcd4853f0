"""``sunny-port`` command line: solve, schedule, metrics, bench, kb validate.

Settings are merged as defaults < config file < environment < flags.  The
result goes to stdout as JSON (or CSV where asked), logs go to stderr.
Exit codes: 0 SAT/OPT/UNS/UNB, 1 UNK, 2 usage error, 3 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .bench import DEFAULT_CORES, METRICS, ROW_LABELS, BenchError, cross_validate
from .executor.adapters import adapters_from_mapping, tomllib
from .executor.engine import ExecutorConfig, solve
from .kb import DEFAULT_K, Direction, Kind, KBError, KnowledgeBase, Outcome, ProblemInstance, load_kb_dir, neighbours
from .metrics import Metric, solver_metrics, vbs, vps_from_table
from .scheduler import Schedule, ScheduleError, parallelise, sunny_schedule

log = logging.getLogger("sunny_port")

EXIT_OK, EXIT_UNKNOWN, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2, 3
ENV_PREFIX = "SUNNY_PORT_"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def detected_cores() -> int:
    return os.cpu_count() or 1


# --- settings ------------------------------------------------------------------------

@dataclass(frozen=True)
class Setting:
    key: str
    parse: Callable[[str], Any]
    default: Any
    help: str


def _bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


SETTINGS = {
    s.key: s
    for s in (
        Setting("cores", int, None, "number of cores c"),
        Setting("timeout", float, 1800.0, "solving timeout T in seconds"),
        Setting("wait_time", float, 2.0, "waiting threshold T_w in seconds"),
        Setting("restart_time", float, 5.0, "restarting threshold T_r in seconds"),
        Setting("k", int, DEFAULT_K, "neighbourhood size"),
        Setting("anytime", _bool, True, "keep the last solver of each core running past T"),
        Setting("mem_limit", int, None, "per-solver memory limit in MB"),
        Setting("ignore_search_annotations", _bool, False, "pass each solver its free-search flag"),
        Setting("detection_cost", float, 5.0, "seconds charged for neighbourhood detection in replay"),
        Setting("kb", str, None, "knowledge base directory (instances.csv + runtimes.csv)"),
        Setting("static_schedule", str, None, "static presolve schedule file"),
    )
}


@dataclass
class CliConfig:
    values: dict[str, Any]
    sources: dict[str, str] = field(default_factory=dict)
    solvers: dict[str, dict] = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None


def _coerce(key: str, raw: Any, origin: str) -> Any:
    if raw is None:
        return None
    try:
        if isinstance(raw, str):
            return SETTINGS[key].parse(raw)
        if SETTINGS[key].parse is _bool and not isinstance(raw, bool):
            raise ValueError("expected true/false")
        return SETTINGS[key].parse(raw) if SETTINGS[key].parse is not str else str(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"{origin}: bad value for {key}: {exc}") from None


def read_config_file(path: str | None) -> tuple[dict, dict]:
    """Executor settings from ``[executor]`` and solver registry from ``[solvers.<id>]``."""
    if path is None:
        return {}, {}
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{path}: {exc}") from None
    executor = data.get("executor", {})
    unknown = set(executor) - set(SETTINGS)
    if unknown:
        raise UsageError(f"{path}: unknown [executor] keys {sorted(unknown)}")
    return {k: _coerce(k, v, path) for k, v in executor.items()}, data.get("solvers", {})


def merge_settings(args: argparse.Namespace, environ: dict | None = None) -> CliConfig:
    environ = os.environ if environ is None else environ
    values = {k: s.default for k, s in SETTINGS.items()}
    values["cores"] = detected_cores()
    sources = {k: "default" for k in SETTINGS}
    file_values, solvers = read_config_file(getattr(args, "config", None))
    for k, v in file_values.items():
        values[k], sources[k] = v, "config"
    for k in SETTINGS:
        env_key = ENV_PREFIX + k.upper()
        if env_key in environ:
            values[k], sources[k] = _coerce(k, environ[env_key], env_key), "env"
    for k in SETTINGS:
        v = getattr(args, k, None)
        if v is not None:
            values[k], sources[k] = v, "flag"
    _validate(values)
    return CliConfig(values, sources, solvers)


def _validate(v: dict) -> None:
    if v["cores"] is not None and v["cores"] < 1:
        raise UsageError("cores must be >= 1")
    if not v["timeout"] > 0:
        raise UsageError("timeout must be positive")
    if v["wait_time"] < 0 or v["restart_time"] < 0:
        raise UsageError("wait and restart thresholds must be non-negative")
    if v["k"] < 1:
        raise UsageError("k must be >= 1")
    if v["mem_limit"] is not None and v["mem_limit"] < 1:
        raise UsageError("memory limit must be a positive number of MB")
    if v["detection_cost"] < 0:
        raise UsageError("detection cost must be non-negative")


# --- inputs ---------------------------------------------------------------------------

def read_static_schedule(path: str | None) -> Schedule:
    """JSON ``[["solver", seconds], ...]`` or CSV lines ``solver,seconds``."""
    if path is None:
        return Schedule()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read static schedule {path}: {exc.strerror}") from None
    try:
        if text.lstrip().startswith("["):
            rows = json.loads(text)
        else:
            rows = [r for r in csv.reader(io.StringIO(text)) if r and not r[0].startswith("#")]
        return Schedule(tuple((str(s).strip(), float(t)) for s, t in rows))
    except (ValueError, TypeError) as exc:
        raise UsageError(f"{path}: malformed static schedule: {exc}") from None


def parse_cores_list(text: str) -> tuple[int, ...]:
    try:
        cores = tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise UsageError(f"bad core list {text!r}") from None
    if not cores or min(cores) < 1:
        raise UsageError("core counts must be positive integers")
    return cores


def load_kb_arg(cfg: CliConfig) -> KnowledgeBase:
    if cfg.kb is None:
        raise UsageError(f"no knowledge base: pass --kb DIR or set {ENV_PREFIX}KB")
    path = Path(cfg.kb)
    if not (path / "instances.csv").is_file() or not (path / "runtimes.csv").is_file():
        raise UsageError(f"{path}: expected instances.csv and runtimes.csv")
    return load_kb_dir(path)


def query_instance(args, kb: KnowledgeBase, instance_id: str | None) -> ProblemInstance:
    """The problem to predict for: a KB entry, or one described by ``--features``."""
    if args.features is None:
        if instance_id is not None and instance_id in kb.instances:
            return kb.instances[instance_id]
        raise UsageError(f"instance {instance_id!r} is not in the knowledge base; pass --features")
    kind, direction, feats = Kind(args.kind), args.direction, None
    src = args.features
    if Path(src).is_file():
        data = json.loads(Path(src).read_text(encoding="utf-8"))
        if isinstance(data, dict):
            kind = Kind(data.get("kind", kind.value))
            direction = data.get("direction", direction)
            feats = data.get("features")
        else:
            feats = data
    else:
        feats = src.split(",")
    try:
        feats = tuple(float(x) for x in feats)
    except (TypeError, ValueError):
        raise UsageError(f"bad feature vector {src!r}") from None
    if direction is None:
        direction = "none" if kind is Kind.CSP else "min"
    if len(feats) != kb.n_features:
        raise UsageError(f"expected {kb.n_features} features, got {len(feats)}")
    return ProblemInstance(instance_id or "query", kind, Direction(direction), feats)


def executor_config(cfg: CliConfig, cores: int | None = None) -> ExecutorConfig:
    overrides = {
        sid: {k: spec[k] for k in ("wait_time", "restart_time") if k in spec}
        for sid, spec in cfg.solvers.items()
    }
    return ExecutorConfig(
        cores=cores or cfg.cores,
        timeout=cfg.timeout,
        wait_time=cfg.wait_time,
        restart_time=cfg.restart_time,
        static_schedule=read_static_schedule(cfg.static_schedule),
        anytime=cfg.anytime,
        memory_limit_mb=cfg.mem_limit,
        ignore_search_annotations=cfg.ignore_search_annotations,
        solver_options={s: o for s, o in overrides.items() if o},
        k=cfg.k,
        detection_cost_s=cfg.detection_cost,
    )


# --- commands ------------------------------------------------------------------------

def cmd_solve(args, cfg: CliConfig) -> tuple[int, dict]:
    kb = load_kb_arg(cfg)
    ecfg = executor_config(cfg)
    if cfg.solvers:
        try:
            adapters = adapters_from_mapping(cfg.solvers)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        if args.features is None and ecfg.cores >= len(adapters):
            problem = ProblemInstance(
                args.instance, Kind(args.kind),
                Direction(args.direction or ("none" if args.kind == "csp" else "min")),
                (0.0,) * kb.n_features,
            )
        else:
            problem = query_instance(args, kb, args.instance)
            problem = ProblemInstance(args.instance, problem.kind, problem.direction, problem.features)
    else:
        if args.instance not in kb.instances:
            raise UsageError(f"instance {args.instance!r} is not in the knowledge base (replay mode)")
        problem, adapters = kb.instances[args.instance], None
    result = solve(problem, ecfg, kb, adapters)
    code = EXIT_UNKNOWN if result.outcome is Outcome.UNK else EXIT_OK
    return code, {"instance": problem.id, **result.to_dict()}


def cmd_schedule(args, cfg: CliConfig) -> tuple[int, dict]:
    kb = load_kb_arg(cfg)
    problem = query_instance(args, kb, args.instance)
    pool = kb.without([problem.id]) if problem.id in kb.instances and len(kb.instances) > 1 else kb
    nbh = neighbours(problem, pool, cfg.k)
    sigma = sunny_schedule(nbh, pool, cfg.timeout)
    out = parallelise(sigma, cfg.cores, cfg.timeout).to_json()
    if args.sigma:
        out = {"sigma": sigma.to_json(), **out}
    return EXIT_OK, out


def metrics_table(kb: KnowledgeBase, cores: Sequence[int]) -> tuple[list[str], list[list]]:
    """Rows ``[strategy, proven %, time, score x 100, area]`` for each solver, VBS and VPS_c."""
    table = solver_metrics(kb)
    cop = {p: row for p, row in table.items() if kb.instances[p].kind is Kind.COP}
    metrics = [m for m in METRICS if cop or m in (Metric.PROVEN, Metric.TIME)]

    def source(m):
        return cop if m in (Metric.SCORE, Metric.AREA) else table

    def scaled(m, x):
        return 100.0 * x if m in (Metric.PROVEN, Metric.SCORE) else x

    def mean(xs):
        xs = list(xs)
        return sum(xs) / len(xs)

    rows = []
    for s in kb.portfolio:
        rows.append([s] + [scaled(m, mean(r[s].get(m) for r in source(m).values())) for m in metrics])
    rows.append(["VBS"] + [scaled(m, mean(vbs(r.values(), m) for r in source(m).values())) for m in metrics])
    for c in cores:
        c_eff = min(c, len(kb.portfolio))
        vals = []
        for m in metrics:
            _, per = vps_from_table(source(m), kb.portfolio, c_eff, m)
            vals.append(scaled(m, mean(per.values())))
        rows.append([f"VPS({c})"] + vals)
    return ["strategy"] + [ROW_LABELS[m] for m in metrics], rows


def cmd_metrics(args, cfg: CliConfig) -> tuple[int, dict | str]:
    kb = load_kb_arg(cfg)
    header, rows = metrics_table(kb, parse_cores_list(args.core_list))
    if args.format == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([r[0]] + [f"{x:.2f}" for x in r[1:]])
        return EXIT_OK, buf.getvalue()
    return EXIT_OK, {"columns": header, "rows": rows}


def cmd_bench(args, cfg: CliConfig) -> tuple[int, dict | str]:
    kb = load_kb_arg(cfg)
    cores = parse_cores_list(args.core_list)
    ecfg = executor_config(cfg, cores=1)
    report = cross_validate(kb, cores, ecfg, seed=args.seed, jobs=args.jobs)
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text + "\n", encoding="utf-8")
    if args.csv:
        table = report.to_csv()
        if args.csv == "-":
            return EXIT_OK, table
        Path(args.csv).write_text(table, encoding="utf-8")
    if args.out:
        return EXIT_OK, {"report": args.out, "csv": args.csv, "aggregate": report.aggregate}
    return EXIT_OK, text


def cmd_kb_validate(args, cfg: CliConfig) -> tuple[int, dict]:
    path = Path(args.dir)
    if not path.is_dir():
        raise UsageError(f"{path}: not a directory")
    kb = load_kb_dir(path)
    return EXIT_OK, {
        "valid": True,
        "summary": kb.summary(),
        "instances": len(kb.instances),
        "solvers": list(kb.portfolio),
        "timeout": kb.timeout,
        "constant_features": list(kb.constant_features),
    }


# --- parser -------------------------------------------------------------------------

def _add_executor_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("executor settings")
    g.add_argument("--cores", type=int, help=f"number of cores c (default: detected, {detected_cores()})")
    g.add_argument("--timeout", type=float, help="solving timeout T in seconds (default: 1800)")
    g.add_argument("--wait-time", dest="wait_time", type=float, help="waiting threshold T_w in seconds (default: 2)")
    g.add_argument("--restart-time", dest="restart_time", type=float,
                   help="restarting threshold T_r in seconds (default: 5)")
    g.add_argument("--k", type=int, help=f"neighbourhood size (default: {DEFAULT_K})")
    any_g = g.add_mutually_exclusive_group()
    any_g.add_argument("--anytime", dest="anytime", action="store_const", const=True,
                       help="let the last solver on each core run past T (default)")
    any_g.add_argument("--no-anytime", dest="anytime", action="store_const", const=False,
                       help="stop every solver at T (default: off)")
    g.add_argument("--mem-limit", dest="mem_limit", type=int, metavar="MB",
                   help="per-solver memory limit in MB (default: none)")
    g.add_argument("--ignore-search-annotations", dest="ignore_search_annotations",
                   action="store_const", const=True, help="run solvers with free search (default: off)")
    g.add_argument("--detection-cost", dest="detection_cost", type=float, metavar="SECONDS",
                   help="virtual seconds charged for neighbourhood detection in replay (default: 5)")
    g.add_argument("--static-schedule", dest="static_schedule", metavar="FILE",
                   help="static presolve schedule, JSON or CSV solver,seconds (default: none)")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--kb", metavar="DIR", help=f"knowledge base directory (default: ${ENV_PREFIX}KB)")
    p.add_argument("--config", metavar="TOML",
                   help="config file with [executor] settings and [solvers.<id>] tables (default: none)")
    p.add_argument("--log-level", default="WARNING", help="stderr log level (default: WARNING)")


def _add_query(p: argparse.ArgumentParser) -> None:
    p.add_argument("--features", metavar="VALUES|FILE",
                   help="comma-separated feature vector or JSON file (default: take from the KB)")
    p.add_argument("--kind", choices=["csp", "cop"], default="csp", help="problem kind for --features (default: csp)")
    p.add_argument("--direction", choices=["min", "max", "none"], default=None,
                   help="optimization direction for --features (default: min for cop, none for csp)")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="sunny-port", description="k-NN solver-portfolio scheduling and execution")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("solve", help="solve one instance with the portfolio")
    p.add_argument("instance", help="KB instance id (replay) or model path (with [solvers] in --config)")
    _add_common(p)
    _add_query(p)
    _add_executor_flags(p)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("schedule", help="print the predicted parallel schedule as JSON")
    p.add_argument("instance", nargs="?", default=None, help="KB instance id (default: use --features)")
    p.add_argument("--sigma", action="store_true", help="also print the sequential schedule (default: off)")
    _add_common(p)
    _add_query(p)
    _add_executor_flags(p)
    p.set_defaults(func=cmd_schedule)

    p = sub.add_parser("metrics", help="per-solver averages with VBS and VPS_c rows", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--cores", dest="core_list", default="1,2,4,8", help="values of c for the VPS_c rows")
    p.add_argument("--format", choices=["json", "csv"], default="json", help="output format")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bench", help="10-fold cross-validated replay benchmark", formatter_class=fmt)
    _add_common(p)
    p.add_argument("--cores", dest="core_list", default=",".join(map(str, DEFAULT_CORES)), help="core counts to evaluate")
    p.add_argument("--seed", type=int, default=0, help="fold shuffle seed")
    p.add_argument("--out", metavar="FILE", default=None, help="write the JSON report here")
    p.add_argument("--csv", metavar="FILE", default=None, help="write the metric table here ('-' for stdout)")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    g = p.add_argument_group("executor settings")
    g.add_argument("--wait-time", dest="wait_time", type=float, help="waiting threshold T_w (default: 2)")
    g.add_argument("--restart-time", dest="restart_time", type=float, help="restarting threshold T_r (default: 5)")
    g.add_argument("--k", type=int, help=f"neighbourhood size (default: {DEFAULT_K})")
    g.add_argument("--detection-cost", dest="detection_cost", type=float,
                   help="virtual seconds charged for neighbourhood detection (default: 5)")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("kb", help="knowledge base utilities")
    kb_sub = p.add_subparsers(dest="kb_command", required=True, parser_class=_Parser)
    v = kb_sub.add_parser("validate", help="load and validate a knowledge base directory")
    v.add_argument("dir", help="directory with instances.csv and runtimes.csv")
    v.add_argument("--log-level", default="WARNING", help="stderr log level (default: WARNING)")
    v.set_defaults(func=cmd_kb_validate)
    return parser


# --- entry point ----------------------------------------------------------------------

def _emit(payload, stream) -> None:
    if isinstance(payload, str):
        stream.write(payload if payload.endswith("\n") else payload + "\n")
    else:
        stream.write(json.dumps(payload) + "\n")


def run_cli(argv: Sequence[str] | None = None, stdout=None, stderr=None, environ: dict | None = None) -> int:
    stdout = stdout or sys.stdout
    stderr = stderr or sys.stderr
    parser = build_parser()
    try:
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:  # --help / --version
            return int(exc.code or 0)
        logging.basicConfig(level=getattr(args, "log_level", "WARNING").upper(), stream=stderr,
                            format="%(levelname)s %(name)s: %(message)s")
        if args.command == "bench" and args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        cfg = merge_settings(args, environ)
        code, payload = args.func(args, cfg)
    except UsageError as exc:
        print(str(exc), file=stderr)
        _emit({"error": str(exc), "exit_code": EXIT_USAGE}, stdout)
        return EXIT_USAGE
    except (KBError, ScheduleError, BenchError, ValueError, OSError, RuntimeError) as exc:
        msg = f"{type(exc).__name__}: {exc}"
        print(msg, file=stderr)
        _emit({"error": msg, "exit_code": EXIT_RUNTIME}, stdout)
        return EXIT_RUNTIME
    _emit(payload, stdout)
    return code


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
