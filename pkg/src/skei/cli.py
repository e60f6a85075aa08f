"""Command line entry point: ``skei {run,report,plot,bench,verify-theory}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from .errors import SkeiError


def _cmd_run(args) -> int:
    from .experiment import load_and_run

    run_dir, manifest = load_and_run(args.config, args.paper_scale, args.output_dir)
    s = manifest["summary"]
    print(f"{run_dir}: {s['method']} {s['iterations']} iterations, final PSNR {s['final_psnr']}")
    return 0


def _cmd_report(args) -> int:
    from .experiment import REPORT_COLUMNS, report

    rows = report(args.dir)
    print(",".join(REPORT_COLUMNS))
    for r in rows:
        print(",".join("" if r[k] is None else str(r[k]) for k in REPORT_COLUMNS))
    return 0


def _cmd_plot(args) -> int:
    from .experiment import plot

    for path in plot(args.dir):
        print(path)
    return 0


def _cmd_bench(args) -> int:
    from .experiment import REPORT_COLUMNS, bench

    rows = bench(args.grid, args.workers, args.paper_scale)
    print(",".join(REPORT_COLUMNS))
    for r in rows:
        print(",".join("" if r[k] is None else str(r[k]) for k in REPORT_COLUMNS))
    return 0


def _cmd_theory(args) -> int:
    from .config import load_config
    from .experiment import run_theory

    result = run_theory(load_config(args.config), args.output_dir)
    keys = ("m", "generic_median", "lowrank_median", "slope", "slope_in_range", "monotone", "lowrank_below")
    print(json.dumps({k: result[k] for k in keys}, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="skei", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="train per a JSON config and write a run directory")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None, help="override the config's output_dir")
    r.add_argument("--paper-scale", action="store_true", help="allow configs with scale=paper")
    r.set_defaults(func=_cmd_run)

    r = sub.add_parser("report", help="CSV table over one run directory or a directory of runs")
    r.add_argument("dir")
    r.set_defaults(func=_cmd_report)

    r = sub.add_parser("plot", help="PSNR/iteration and MSE/wall-time PNGs per run")
    r.add_argument("dir")
    r.set_defaults(func=_cmd_plot)

    r = sub.add_parser("bench", help="run every combination in a config grid, then report")
    r.add_argument("grid")
    r.add_argument("--workers", type=int, default=None, help="parallel processes")
    r.add_argument("--paper-scale", action="store_true")
    r.set_defaults(func=_cmd_bench)

    r = sub.add_parser("verify-theory", help="sketch-deviation scaling study")
    r.add_argument("config")
    r.add_argument("--output-dir", default=None)
    r.set_defaults(func=_cmd_theory)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SkeiError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
