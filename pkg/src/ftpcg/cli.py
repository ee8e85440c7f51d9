"""Command-line interface.

``ftpcg run <config>`` executes one experiment described by a flat
``key = value`` config file and writes JSON + CSV reports;
``ftpcg report <file.json>`` re-aggregates a previously written JSON report.

Config keys: matrix (poisson2d | banded | path to a Matrix Market file),
n (grid size for poisson2d, dimension for banded), nodes, mode
(plain | esr | esrp | imcr), T (storage/checkpoint interval), nredu,
failures (a count, or "@J:r1,r2,..." for an explicit iteration and ranks),
location (start | center), rtol, reps, seed, preconditioner_block,
out (report base path).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .harness import (
    ExperimentSpec,
    aggregate,
    emit_report,
    load_reports,
    run_experiment,
)

_SPEC_KEYS = {
    "matrix": str,
    "n": int,
    "nodes": int,
    "mode": str,
    "nredu": int,
    "location": str,
    "rtol": float,
    "reps": int,
    "seed": int,
    "preconditioner_block": int,
}


def parse_failures(text: str) -> dict:
    """``failures`` value: either a count, or "@J:r1,r2" pinning the
    iteration and the exact ranks."""
    text = text.strip()
    if not text.startswith("@"):
        return {"failures": int(text)}
    head, sep, tail = text[1:].partition(":")
    if not sep or not tail:
        raise ValueError(
            f"explicit failure spec must look like '@ITERATION:rank,rank', got {text!r}"
        )
    ranks = tuple(int(r) for r in tail.split(","))
    return {
        "failures": len(ranks),
        "failure_iteration": int(head),
        "explicit_ranks": ranks,
    }


def parse_config(path: str | Path) -> tuple[ExperimentSpec, str]:
    """Read a flat key = value config file; returns (spec, report base path)."""
    kwargs: dict = {}
    out = "reports/experiment"
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = key.strip(), value.strip()
        if key == "out":
            out = value
        elif key == "T":
            kwargs["period"] = int(value)
        elif key == "failures":
            kwargs.update(parse_failures(value))
        elif key in _SPEC_KEYS:
            kwargs[key] = _SPEC_KEYS[key](value)
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
    return ExperimentSpec(**kwargs), out


def _print_aggregate(rows: list[dict]) -> None:
    for row in rows:
        head = (
            f"{row['scenario']:<13} mode={row['mode']:<5} T={row['period']:<3} "
            f"nredu={row['nredu']} n_fail={row['n_fail']} loc={row['location']:<6} "
            f"reps={row['reps']}"
        )
        if row.get("errors"):
            head += f" errors={row['errors']}"
        if "iterations" in row:
            head += (
                f" iterations={row['iterations']}"
                f" wasted={row['wasted_iterations']}"
                f" overhead={row['median_relative_overhead']:+.3f}"
                f" drift={row['residual_drift']:+.3e}"
            )
        print(head)


def cmd_run(args: argparse.Namespace) -> int:
    spec, out = parse_config(args.config)
    if args.out:
        out = args.out
    reports = run_experiment(spec)
    json_path, csv_path = emit_report(reports, out)
    print(f"wrote {json_path} and {csv_path}")
    _print_aggregate(aggregate(reports))
    failed = [r for r in reports if r.error is not None]
    for r in failed:
        print(
            f"error in {r.scenario} repetition {r.repetition}: {r.error}",
            file=sys.stderr,
        )
    return 1 if (args.strict and failed) else 0


def cmd_report(args: argparse.Namespace) -> int:
    reports = load_reports(args.json)
    _print_aggregate(aggregate(reports))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ftpcg",
        description=(
            "Fault-tolerant preconditioned conjugate gradient experiments on "
            "a simulated message-passing cluster"
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiment described by a config file")
    p_run.add_argument("config", help="path to a flat key = value config file")
    p_run.add_argument("--out", help="report base path (overrides the config)")
    p_run.add_argument(
        "--strict",
        action="store_true",
        help="exit nonzero if any repetition records an unrecoverable error",
    )
    p_run.set_defaults(func=cmd_run)

    p_rep = sub.add_parser("report", help="re-aggregate a JSON report")
    p_rep.add_argument("json", help="path to a report .json written by 'run'")
    p_rep.set_defaults(func=cmd_report)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
