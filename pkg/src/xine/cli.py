"""Command line front end.

Subcommands:

    run         boot and execute a scenario, emitting the JSONL trace
    validate    structural checks on a scenario config
    measure     write the boot-chain measurement list and memory map file
    trace-check verify a trace file is well formed
    report      render the CSV table and figures for a trace

``run`` exits with the scenario's code: 0 clean, 2 boot failure, 3 kill,
4 step budget exhausted, 5 assertion failure. The TRNG seed comes from
``--seed`` when given, else the ``XINE_SEED`` environment variable, else
the scenario file.
"""

from __future__ import annotations

import argparse
import os
import sys

from .boot import write_measurements
from .scenario import (
    SEED_ENV_VAR,
    ScenarioError,
    load_scenario,
    measure_scenario,
    run_scenario,
    validate_trace_lines,
    write_trace,
)


def _resolve_seed(args) -> int | None:
    if args.seed is not None:
        return args.seed
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None:
        try:
            return int(env, 0)
        except ValueError:
            raise SystemExit(f"bad {SEED_ENV_VAR} value: {env!r}")
    return None


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        result = run_scenario(scenario, seed=_resolve_seed(args))
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.trace and args.trace != "-":
        with open(args.trace, "w", encoding="utf-8") as fh:
            write_trace(result.log, fh)
    else:
        write_trace(result.log, sys.stdout)
    for failure in result.assertion_failures:
        print(f"failed: {failure}", file=sys.stderr)
    if not args.quiet:
        summary = (f"{scenario.name}: boot={'ok' if result.boot.ok else 'failed'}"
                   f" steps={result.run.steps if result.run else 0}"
                   f" killed={','.join(result.killed) or '-'}"
                   f" exit={result.exit_code}")
        print(summary, file=sys.stderr)
    return result.exit_code


def cmd_validate(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    issues = scenario.validate()
    for issue in issues:
        print(issue)
    if issues:
        return 1
    print(f"{scenario.name}: ok")
    return 0


def cmd_measure(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        entries = measure_scenario(scenario)
    except (ScenarioError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    stem = os.path.splitext(args.scenario)[0]
    out = args.output or f"{stem}.measurements"
    memmap_out = args.memmap_output or f"{stem}.memmap"
    write_measurements(out, entries)
    with open(memmap_out, "wb") as fh:
        fh.write(scenario.memmap_bytes())
    for name, digest in entries:
        print(f"{digest.hex()}  {name}")
    print(f"wrote {out} and {memmap_out}", file=sys.stderr)
    return 0


def cmd_trace_check(args) -> int:
    try:
        with open(args.trace, encoding="utf-8") as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    issues = validate_trace_lines(lines)
    for issue in issues:
        print(issue)
    if issues:
        return 1
    print(f"{args.trace}: {len(lines)} events, ok")
    return 0


def cmd_report(args) -> int:
    from .report import render_report
    try:
        paths = render_report(args.trace, args.output_dir)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for path in paths:
        print(path)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xine",
        description="Deterministic enclave platform simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="boot and execute a scenario")
    p.add_argument("scenario", help="scenario JSON file")
    p.add_argument("--trace", help="trace output path ('-' for stdout)")
    p.add_argument("--seed", type=lambda s: int(s, 0),
                   help="override the TRNG seed")
    p.add_argument("--quiet", action="store_true",
                   help="suppress the summary line")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("validate", help="check a scenario config")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("measure", help="write boot measurements")
    p.add_argument("scenario")
    p.add_argument("-o", "--output", help="measurement list path")
    p.add_argument("--memmap-output", help="canonical memory map path")
    p.set_defaults(func=cmd_measure)

    p = sub.add_parser("trace-check", help="verify a trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_trace_check)

    p = sub.add_parser("report", help="render CSV and figures for a trace")
    p.add_argument("trace")
    p.add_argument("-o", "--output-dir", help="directory for the outputs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
