"""Command line entry point: ``bnmarl run <config>`` and ``bnmarl summarize <dir>``."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import (TOPOLOGIES, ConfigError, final_summary_csv, load_config,
                         parse_seed_arg, run, summarize)

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


def _fmt_pair(pair) -> str:
    mean, se = pair
    return "-" if mean is None else f"{mean:.4f} ± {se:.4f}"


def print_table(table, stream=None):
    stream = stream or sys.stdout
    print(f"{'topology':<15}{'seeds':>6}  {'value':>20}  {'poa':>18}  {'nash_gap':>18}  "
          f"{'density':>18}", file=stream)
    for row in table:
        print(f"{row.topology:<15}{row.n_seeds:>6}  {_fmt_pair(row.value):>20}  "
              f"{_fmt_pair(row.poa):>18}  {_fmt_pair(row.nash_gap):>18}  "
              f"{_fmt_pair(row.dag_density):>18}", file=stream)


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.seeds:
            config.seeds = parse_seed_arg(args.seeds)
        if args.topology:
            config.topologies = [t.strip() for t in args.topology.split(",")]
        if args.workers:
            config.workers = args.workers
        config.validate()
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out)
    outcome = run(config, out)
    for topology, seed, err in outcome.failures:
        print(f"error: topology {topology} seed {seed} failed: {err}", file=sys.stderr)
    print(f"wrote {len(outcome.files)} run files and {len(outcome.summaries)} summaries to {out}")
    if outcome.files:
        table = summarize(out)
        (out / "final_summary.csv").write_text(final_summary_csv(table))
        print_table(table)
    return EXIT_RUNTIME if outcome.failures else EXIT_OK


def cmd_summarize(args) -> int:
    try:
        table = summarize(args.dir)
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    text = final_summary_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    print_table(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnmarl", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run the experiments described by a YAML config")
    p_run.add_argument("config")
    p_run.add_argument("--seeds", help="override seeds, e.g. 7 or 0-49 or 1,2,3")
    p_run.add_argument("--topology", help=f"override topologies (comma separated): {', '.join(TOPOLOGIES)}")
    p_run.add_argument("--out", default="results", help="output directory (default: results)")
    p_run.add_argument("--workers", type=int, help="worker processes")
    p_run.set_defaults(func=cmd_run)

    p_sum = sub.add_parser("summarize", help="aggregate final rows of every run CSV in a directory")
    p_sum.add_argument("dir")
    p_sum.add_argument("--out", help="also write the table as CSV")
    p_sum.set_defaults(func=cmd_summarize)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
