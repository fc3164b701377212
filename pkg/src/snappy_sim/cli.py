"""Command line entry point: ``snappy-sim``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

from pydantic import ValidationError

from .chain import write_jsonl
from .harness.bench import BenchConfig, run_latency
from .harness.fuzz import FuzzConfig, run_fuzz
from .harness.scenario import Scenario
from .harness.suite import builtin_scenarios
from .harness.world import run_scenario
from .vectors import dumps_vectors, generate_vectors

EXIT_OK = 0
EXIT_VIOLATION = 1
EXIT_USAGE = 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = Scenario.load(args.scenario)
    except (OSError, json.JSONDecodeError, ValidationError) as exc:
        print(f"cannot load scenario: {exc}", file=sys.stderr)
        return EXIT_USAGE
    result = run_scenario(scenario, seed=args.seed)
    if args.trace:
        write_jsonl(result.trace, args.trace)
    summary = {
        "scenario": scenario.name,
        "ok": result.ok,
        "trace_hash": result.trace_hash,
        "conservation_ok": result.conservation_ok,
        "failures": result.failures,
        "audit": result.audit.as_dict(),
        "metrics": result.metrics.as_dict(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK if result.ok else EXIT_VIOLATION


def cmd_fuzz(args: argparse.Namespace) -> int:
    cfg = FuzzConfig(iters=args.iters, seed=args.seed, repro_dir=args.repro_dir)

    def progress(done: int, report) -> None:
        if args.progress and done % args.progress == 0:
            print(f"{done}/{cfg.iters} violations={report.violations}", file=sys.stderr)

    report = run_fuzz(cfg, progress)
    print(json.dumps(report.as_dict(), indent=2))
    return EXIT_OK if report.ok else EXIT_VIOLATION


def cmd_bench_latency(args: argparse.Namespace) -> int:
    rows = []
    for rate in args.rate:
        for k in args.k:
            res = run_latency(
                BenchConfig(
                    k=k,
                    rate=rate,
                    matrix=args.matrix,
                    duration_ms=args.duration,
                    jitter=args.jitter,
                    seed=args.seed,
                )
            )
            rows.append(res.as_dict())
            print(
                f"k={k:<4d} rate={rate:<6g} p50={res.p50:8.1f}ms p90={res.p90:8.1f}ms "
                f"p99={res.p99:8.1f}ms crypto={res.crypto_checked - res.crypto_failures}/{res.crypto_checked}",
                file=sys.stderr,
            )
    print(json.dumps(rows, indent=2))
    failed = any(r["crypto_failures"] for r in rows)
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_suite(args: argparse.Namespace) -> int:
    failed = 0
    for scenario in builtin_scenarios():
        if args.only and scenario.name not in args.only:
            continue
        result = run_scenario(scenario)
        m = result.metrics
        status = "PASS" if result.ok else "FAIL"
        print(
            f"{status} {scenario.name:40s} accepted={m.accepted} aborted={m.aborted} "
            f"settlements={m.settlements} deductions={m.deductions}"
        )
        for f in result.failures:
            print(f"     {f}")
        failed += 0 if result.ok else 1
    return EXIT_VIOLATION if failed else EXIT_OK


def cmd_vectors(args: argparse.Namespace) -> int:
    text = dumps_vectors(generate_vectors())
    if args.out == "-":
        sys.stdout.write(text)
    else:
        Path(args.out).write_text(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="snappy-sim", description="Simulator for fast collateralised on-chain payments.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one scenario file")
    run.add_argument("scenario")
    run.add_argument("--seed", type=int, default=None, help="override the scenario seed")
    run.add_argument("--trace", default=None, help="write the trace as JSON lines")
    run.set_defaults(fn=cmd_run)

    fz = sub.add_parser("fuzz", help="seeded adversarial fuzzing")
    fz.add_argument("--iters", type=int, default=1000)
    fz.add_argument("--seed", type=int, default=0)
    fz.add_argument("--repro-dir", default=None, help="write shrunk reproducers here")
    fz.add_argument("--progress", type=int, default=0, help="print progress every N runs")
    fz.set_defaults(fn=cmd_fuzz)

    bench = sub.add_parser("bench", help="benchmarks")
    bsub = bench.add_subparsers(dest="bench", required=True)
    lat = bsub.add_parser("latency", help="approval latency versus consortium size")
    lat.add_argument("--matrix", default=None, help="RTT CSV (region_a,region_b,rtt_ms); shipped matrix if omitted")
    lat.add_argument("--k", type=_int_list, default=[10, 20, 40, 100, 200])
    lat.add_argument("--rate", type=_float_list, default=[1000.0])
    lat.add_argument("--duration", type=float, default=1000.0, help="simulated ms of load")
    lat.add_argument("--jitter", type=float, default=0.1)
    lat.add_argument("--seed", type=int, default=0)
    lat.set_defaults(fn=cmd_bench_latency)

    st = sub.add_parser("suite", help="run the built-in scenarios")
    st.add_argument("--only", nargs="*", default=None)
    st.set_defaults(fn=cmd_suite)

    vec = sub.add_parser("vectors", help="emit crypto test vectors as JSON")
    vec.add_argument("--out", default="-")
    vec.set_defaults(fn=cmd_vectors)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
