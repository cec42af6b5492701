"""Command-line front end: run plans under faults, sweep ablations, verify logs.

Every flag can also be supplied through an environment variable named
``WALPIPE_<FLAG>`` (dashes become underscores, e.g. ``WALPIPE_SEED=7``);
explicit flags win over the environment.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import os
import pathlib
import sys

from .audit import AuditLogError, audit_log_file, audit_trace, write_audit_log
from .coordinator import Unrecoverable
from .harness import Deadlock, Fault, SimConfig, run
from .plan import PlanError, load_plan_file, validate_plan
from .worker import BatchingPolicy, FtStrategy

DEFAULT_SEED = 0
ENV_PREFIX = "WALPIPE_"

_CONFIG_FIELDS = {f.name: f.type for f in dataclasses.fields(SimConfig)}


def _env(name: str):
    return os.environ.get(ENV_PREFIX + name.upper().replace("-", "_"))


def _add_run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--plan", default=_env("plan"), help="plan file (JSON)")
    p.add_argument("--config", default=_env("config"), help="JSON file of config overrides")
    p.add_argument(
        "--kill",
        action="append",
        default=None,
        metavar="worker=<id|random>",
        help="inject a worker failure; repeatable, paired positionally with --at",
    )
    p.add_argument(
        "--at",
        action="append",
        default=None,
        metavar="<fraction|time>",
        help="when the paired --kill fires: 0..1 = fraction of calibrated "
        "failure-free progress, >1 = absolute simulated time",
    )
    p.add_argument("--strategy", default=_env("strategy") or "wal", choices=["wal", "spool", "restart"])
    p.add_argument("--batching", default=_env("batching") or "dynamic", help="dynamic | static:B")
    p.add_argument("--workers", type=int, default=int(_env("workers") or 3))
    p.add_argument("--seed", type=int, default=int(_env("seed") or DEFAULT_SEED))
    p.add_argument("--blocking", action="store_true", help="stagewise instead of pipelined execution")
    p.add_argument("--out", default=_env("out") or ".", help="output directory")


def _parse_kills(args) -> list:
    kills = args.kill or (_env("kill").split(";") if _env("kill") else [])
    ats = args.at or (_env("at").split(";") if _env("at") else [])
    if len(kills) != len(ats):
        raise SystemExit(_fail(f"need one --at per --kill ({len(kills)} kills, {len(ats)} ats)"))
    faults = []
    for kill, at in zip(kills, ats):
        if not kill.startswith("worker="):
            raise SystemExit(_fail(f"bad --kill {kill!r}; expected worker=<id|random>"))
        who = kill.split("=", 1)[1]
        worker = who if who == "random" else int(who)
        t = float(at)
        if 0.0 <= t <= 1.0:
            faults.append(Fault(worker=worker, at_fraction=t))
        else:
            faults.append(Fault(worker=worker, at_time=t))
    return faults


def _build_config(args) -> SimConfig:
    overrides = {}
    if args.config:
        path = pathlib.Path(args.config)
        if not path.exists():
            raise SystemExit(_fail(f"config file not found: {path}"))
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        unknown = set(doc) - set(_CONFIG_FIELDS)
        if unknown:
            raise SystemExit(_fail(f"unknown config keys: {sorted(unknown)}"))
        overrides.update(doc)
    overrides["workers"] = args.workers
    overrides["seed"] = args.seed
    overrides["blocking"] = bool(getattr(args, "blocking", False))
    overrides["strategy"] = FtStrategy(args.strategy, BatchingPolicy.parse(args.batching))
    return SimConfig(**overrides)


def _load_plan(args):
    if not args.plan:
        raise SystemExit(_fail("--plan is required"))
    path = pathlib.Path(args.plan)
    if not path.exists():
        raise SystemExit(_fail(f"plan file not found: {path}"))
    plan, datasets = load_plan_file(path)
    return validate_plan(plan), datasets


def _fail(msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return 2


def cmd_run(args) -> int:
    vplan, datasets = _load_plan(args)
    config = _build_config(args)
    faults = _parse_kills(args)
    out_dir = pathlib.Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = run(vplan, datasets, config, faults)
    except (Unrecoverable, Deadlock) as exc:
        return _fail(str(exc))
    write_audit_log(result.trace, out_dir / "audit.jsonl")
    metrics = result.metrics
    with open(out_dir / "metrics.json", "w", encoding="utf-8") as fh:
        json.dump(metrics.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(out_dir / "metrics.txt", "w", encoding="utf-8") as fh:
        fh.write("\n".join(metrics.lines()) + "\n")
    violations = audit_trace(result.trace)
    for v in violations:
        print(str(v), file=sys.stderr)
    print(f"result_digest={metrics.result_digest}")
    print(f"makespan={metrics.makespan}")
    print(f"audit={'clean' if not violations else f'{len(violations)} violations'}")
    return 0 if not violations else 1


_ABLATE_COLUMNS = (
    "workers",
    "mode",
    "strategy",
    "batching",
    "makespan",
    "overhead",
    "recoveries",
    "rewinds",
    "replays",
    "bytes_pushed",
    "bytes_local",
    "bytes_durable",
    "lineage_bytes",
)


def cmd_ablate(args) -> int:
    vplan, datasets = _load_plan(args)
    faults = _parse_kills(args)
    strategies = [s for s in args.strategies.split(",") if s]
    batchings = [b for b in args.batchings.split(",") if b]
    modes = [m for m in args.modes.split(",") if m]
    worker_counts = [int(w) for w in args.worker_counts.split(",") if w]
    rows = []
    for workers in worker_counts:
        base_args = argparse.Namespace(**vars(args))
        base_args.workers = workers
        baselines = {}
        for mode in modes:
            if mode not in ("pipelined", "blocking"):
                return _fail(f"unknown mode {mode!r} (pipelined | blocking)")
            for strat in strategies:
                for batching in batchings:
                    base_args.strategy = strat
                    base_args.batching = batching
                    base_args.blocking = mode == "blocking"
                    config = _build_config(base_args)
                    if workers not in baselines:
                        base_cfg = dataclasses.replace(
                            config,
                            blocking=False,
                            strategy=FtStrategy("restart", BatchingPolicy("dynamic")),
                        )
                        baselines[workers] = run(vplan, datasets, base_cfg, ()).metrics.makespan
                    try:
                        res = run(vplan, datasets, config, faults)
                    except (Unrecoverable, Deadlock) as exc:
                        return _fail(str(exc))
                    m = res.metrics
                    m.overhead = m.makespan / baselines[workers]
                    rows.append(
                        {
                            "workers": workers,
                            "mode": mode,
                            "strategy": strat,
                            "batching": batching,
                            **{
                                k: getattr(m, k)
                                for k in _ABLATE_COLUMNS
                                if k not in ("workers", "mode", "strategy", "batching")
                            },
                        }
                    )
    table = _format_table(rows)
    print(table)
    if args.out:
        out_dir = pathlib.Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "ablation.txt", "w", encoding="utf-8") as fh:
            fh.write(table + "\n")
        with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
            json.dump(rows, fh, indent=2, sort_keys=True)
            fh.write("\n")
    return 0


def _format_table(rows: list) -> str:
    def fmt(v):
        return f"{v:.3f}" if isinstance(v, float) else str(v)

    cells = [[fmt(r[c]) for c in _ABLATE_COLUMNS] for r in rows]
    widths = [
        max(len(col), *(len(row[i]) for row in cells)) if cells else len(col)
        for i, col in enumerate(_ABLATE_COLUMNS)
    ]
    lines = [
        "  ".join(col.ljust(w) for col, w in zip(_ABLATE_COLUMNS, widths)),
        "  ".join("-" * w for w in widths),
    ]
    lines.extend("  ".join(c.ljust(w) for c, w in zip(row, widths)) for row in cells)
    return "\n".join(lines)


def cmd_verify(args) -> int:
    path = pathlib.Path(args.log)
    if not path.exists():
        return _fail(f"audit log not found: {path}")
    try:
        violations = audit_log_file(path)
    except AuditLogError as exc:
        return _fail(str(exc))
    for v in violations:
        print(str(v), file=sys.stderr)
    print(f"{path}: {'clean' if not violations else f'{len(violations)} violations'}")
    return 0 if not violations else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="walpipe",
        description="Pipelined query engine with write-ahead lineage fault tolerance, "
        "executed in a deterministic cluster simulator.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a plan file under an optional fault spec")
    _add_run_flags(p_run)
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="sweep strategies x batching x workers x mode")
    _add_run_flags(p_ablate)
    p_ablate.add_argument("--strategies", default=_env("strategies") or "wal,spool,restart")
    p_ablate.add_argument("--batchings", default=_env("batchings") or "dynamic,static:8")
    p_ablate.add_argument("--modes", default=_env("modes") or "pipelined")
    p_ablate.add_argument("--worker-counts", default=_env("worker_counts") or "3")
    p_ablate.set_defaults(func=cmd_ablate)

    p_verify = sub.add_parser("verify", help="replay an audit log through the offline auditor")
    p_verify.add_argument("log", help="path to audit.jsonl")
    p_verify.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except PlanError as exc:
        return _fail(str(exc))


if __name__ == "__main__":
    sys.exit(main())
