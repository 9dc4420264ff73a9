"""Command-line front end: run / validate / report."""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigurationError
from .runner import EXIT_CONFIG, EXIT_IO, report_results, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hyperfed",
        description="Federated-learning backdoor robustness experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run the experiment described by a config file")
    run.add_argument("config", type=Path)

    validate = sub.add_parser("validate", help="parse and validate a config file")
    validate.add_argument("config", type=Path)

    report = sub.add_parser("report", help="print phase averages and lifespan for a results dir")
    report.add_argument("results_dir", type=Path)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "validate":
        try:
            load_config(args.config)
        except FileNotFoundError:
            print(f"error: no such config file: {args.config}", file=sys.stderr)
            return EXIT_IO
        except ConfigurationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"{args.config}: ok")
        return 0

    if args.command == "run":
        try:
            cfg = load_config(args.config)
        except FileNotFoundError:
            print(f"error: no such config file: {args.config}", file=sys.stderr)
            return EXIT_IO
        except ConfigurationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        try:
            code = run_experiment(cfg)  # paths resolve against the working directory
        except ConfigurationError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
        if code == 0:
            print(f"artifacts written to {cfg.output_dir}")
        return code

    try:
        print(report_results(args.results_dir))
    except ConfigurationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return 0


if __name__ == "__main__":
    sys.exit(main())
