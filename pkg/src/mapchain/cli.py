"""Command line interface.

    mapchain run <scenario-file> [--out <csv>] [--seed-override <n>]
                 [--ticks <n>] [--quiet] [--parallel]
    mapchain report <scenario-file> [--out-dir <dir>] [--seed-override <n>]
                    [--ticks <n>] [--quiet]

`run` writes the metrics CSV to the named file or standard output (`--out -`,
the default). `report` runs the scenario and writes metrics.csv plus PNG
figures into the output directory. Diagnostics go to standard error; the
MAPCHAIN_LOG environment variable (error, info, debug) sets their level.

Exit codes: 0 success, 2 scenario validation failure, 3 runtime error.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

from .scenario import ScenarioError, load_scenario
from .sim import FinalReport, emit_csv, emit_csv_path, run

EXIT_OK = 0
EXIT_SCENARIO = 2
EXIT_RUNTIME = 3

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO,
               "debug": logging.DEBUG}

log = logging.getLogger("mapchain.cli")


def _setup_logging(quiet: bool) -> None:
    name = os.environ.get("MAPCHAIN_LOG", "error").lower()
    level = _LOG_LEVELS.get(name, logging.ERROR)
    if quiet:
        level = logging.ERROR
    logging.basicConfig(
        stream=sys.stderr, level=level,
        format="%(levelname)s %(name)s: %(message)s",
        force=True,
    )


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mapchain",
        description="Self-healing map chain scenario runner",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario and emit metrics CSV")
    run_p.add_argument("scenario", help="scenario file path")
    run_p.add_argument("--out", default="-",
                       help="CSV output path, '-' for standard output")
    run_p.add_argument("--seed-override", type=int, default=None,
                       help="replace the scenario seed")
    run_p.add_argument("--ticks", type=int, default=None,
                       help="replace the scenario duration")
    run_p.add_argument("--quiet", action="store_true",
                       help="suppress the summary on standard error")
    run_p.add_argument("--parallel", action="store_true",
                       help="evaluate vehicles concurrently (same metrics)")

    rep_p = sub.add_parser(
        "report", help="run a scenario, write metrics.csv plus PNG figures"
    )
    rep_p.add_argument("scenario", help="scenario file path")
    rep_p.add_argument("--out-dir", default="report",
                       help="output directory for metrics.csv and figures")
    rep_p.add_argument("--seed-override", type=int, default=None)
    rep_p.add_argument("--ticks", type=int, default=None)
    rep_p.add_argument("--quiet", action="store_true")
    return parser


def _summary(report: FinalReport) -> str:
    converged = (
        f"master converged at tick {report.converged_tick}"
        if report.converged_tick is not None
        else "master did not converge"
    )
    return (
        f"{report.ticks} ticks, {report.vehicles} vehicles; {converged}; "
        f"final mismatch {report.master_mismatch_final}; "
        f"frames {report.frames_sent_total} sent / "
        f"{report.frames_dropped_total} dropped; "
        f"{report.heal_patches_total} healing patches, "
        f"{report.patch_bytes_total} patch bytes, "
        f"{report.uplink_bytes_total} uplink bytes"
    )


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    _setup_logging(args.quiet)

    try:
        scenario = load_scenario(args.scenario)
        if args.seed_override is not None:
            scenario.seed = args.seed_override
        if args.ticks is not None:
            scenario.duration = args.ticks
        scenario.validate()
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO

    try:
        parallel = getattr(args, "parallel", False)
        metrics, report = run(scenario, parallel=parallel)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return EXIT_SCENARIO
    except Exception as exc:  # runtime failure, exit 3 per contract
        log.error("run failed: %s", exc, exc_info=log.isEnabledFor(logging.DEBUG))
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    try:
        if args.command == "run":
            if args.out == "-":
                emit_csv(metrics, sys.stdout)
            else:
                emit_csv_path(metrics, args.out)
        else:
            from .report import render_figures  # matplotlib import on demand

            out_dir = Path(args.out_dir)
            out_dir.mkdir(parents=True, exist_ok=True)
            emit_csv_path(metrics, str(out_dir / "metrics.csv"))
            written = render_figures(metrics, out_dir)
            if not args.quiet:
                for path in [out_dir / "metrics.csv", *written]:
                    print(f"wrote {path}", file=sys.stderr)
    except OSError as exc:
        print(f"runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME

    if not args.quiet:
        print(_summary(report), file=sys.stderr)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
