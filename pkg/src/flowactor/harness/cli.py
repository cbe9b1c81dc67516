"""Command line entry point: run scenarios, compare state dumps, replay logs."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Optional, Sequence

from ..coordinator import CoordinatorLog, CoordinatorState
from .golden import ChainMismatch, golden_compare, load_dump, save_dump
from .run import run_scenario
from .scenario import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_USAGE = 2


def _write_latency_csv(path: Path, samples: list[int]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["index", "latency_ns"])
        for i, ns in enumerate(samples):
            w.writerow([i, ns])


def cmd_run(args: argparse.Namespace) -> int:
    try:
        sc = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    if args.mode == "benchmark" or (args.mode is None and sc.mode == "benchmark"):
        if args.dump_state:
            print("error: --dump-state needs deterministic mode", file=sys.stderr)
            return EXIT_USAGE
    if args.runtimes is not None:
        sc.cluster.runtimes = args.runtimes
    if args.seconds is not None:
        sc.benchmark_seconds = args.seconds
    result = run_scenario(sc, mode=args.mode, seed=args.seed, log_path=args.log)
    report = result.report
    if args.out:
        Path(args.out).write_text("\n".join(report.ndjson_records()) + "\n", encoding="utf-8")
    if args.dump_state and result.dump is not None:
        save_dump(result.dump, args.dump_state)
    if args.latency_csv:
        _write_latency_csv(Path(args.latency_csv), report.latency_ns)
    print(report.summary_table())
    for line in (result.golden_diff or [])[:20]:
        print(f"golden diff: {line}")
    for line in (result.prefix_diff or [])[:20]:
        print(f"prefix diff: {line}")
    for line in result.invariant_violations[:20]:
        print(f"invariant: {line}")
    return EXIT_OK if report.passed else EXIT_FAILED


def cmd_compare(args: argparse.Namespace) -> int:
    try:
        diffs = golden_compare(load_dump(args.a), load_dump(args.b))
    except (ValueError, OSError) as exc:
        kind = "chain mismatch" if isinstance(exc, ChainMismatch) else "error"
        print(f"{kind}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    for line in diffs[: args.limit]:
        print(line)
    if len(diffs) > args.limit:
        print(f"... {len(diffs) - args.limit} more")
    print(f"{len(diffs)} difference(s)")
    return EXIT_OK if not diffs else EXIT_FAILED


def cmd_replay_log(args: argparse.Namespace) -> int:
    try:
        records = CoordinatorLog.read(args.log)
        state = CoordinatorState.replay(records)
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    actions = [r for r in records if r.get("type") == "action"]
    if args.actions:
        for r in actions:
            fields = {k: v for k, v in r.items() if k not in ("seq", "t", "type", "action")}
            print(f"{r['t']:>15} {r['action']} {json.dumps(fields, sort_keys=True)}")
    counts = Counter(r.get("type") for r in records)
    print(json.dumps({"records": len(records), "by_type": dict(sorted(counts.items())),
                      "actions": dict(sorted(Counter(r["action"] for r in actions).items())),
                      "state": state.snapshot()}, indent=1, sort_keys=True, default=str))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="flowactor", description="Per-flow actor NFV runtime simulator and benchmark.")
    p.add_argument("-v", "--verbose", action="count", default=0, help="log more (repeat for debug)")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario file")
    run.add_argument("scenario", type=Path)
    run.add_argument("--mode", choices=["deterministic", "benchmark"], help="override the scenario's mode")
    run.add_argument("--seed", type=int, help="override the scenario's seed")
    run.add_argument("--out", type=Path, help="write newline-delimited JSON metrics here")
    run.add_argument("--dump-state", type=Path, help="write the final state dump here (deterministic mode)")
    run.add_argument("--latency-csv", type=Path, help="write latency samples as CSV")
    run.add_argument("--log", type=Path, help="append the coordinator log here")
    run.add_argument("--runtimes", type=int, help="benchmark: number of runtime processes")
    run.add_argument("--seconds", type=float, help="benchmark: traffic duration in wall seconds")
    run.set_defaults(fn=cmd_run)

    cmp_ = sub.add_parser("compare", help="field-level diff of two state dumps")
    cmp_.add_argument("a", type=Path)
    cmp_.add_argument("b", type=Path)
    cmp_.add_argument("--limit", type=int, default=50, help="print at most this many differences")
    cmp_.set_defaults(fn=cmd_compare)

    rep = sub.add_parser("replay-log", help="rebuild coordinator state from its log")
    rep.add_argument("log", type=Path)
    rep.add_argument("--actions", action="store_true", help="also list every logged action")
    rep.set_defaults(fn=cmd_replay_log)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING if args.verbose == 0 else logging.INFO if args.verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
