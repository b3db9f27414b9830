"""Command line entry point.

    fednano run <config> [--set key=value ...] [--out DIR]
    fednano report <dir>
    fednano partition <config> [--out FILE] [--seed N]
    fednano account <config>
    fednano defaults

Exit codes: 0 ok, 1 run failure, 2 config error.  Relative output directories
are placed under $FEDNANO_OUTPUT_ROOT when it is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .data import build_client_datasets, export_datasets
from .federation import communication_report
from .harness import ConfigError, ExperimentSpec, emit_config, parse_config, report_dir, resolve_output_dir, run_experiment

EXIT_OK, EXIT_RUN, EXIT_CONFIG = 0, 1, 2


def _overrides(pairs: list[str]) -> dict[str, str]:
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError({pair: "override must look like key=value"})
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fednano", description="Federated NanoAdapter simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every strategy/seed in a config")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="output directory (overrides output_dir)")

    p = sub.add_parser("report", help="print the comparison table for a run directory")
    p.add_argument("dir")

    p = sub.add_parser("partition", help="write the client dataset fixture")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--out", help="record file path (default: <output_dir>/datasets.jsonl)")
    p.add_argument("--seed", type=int, help="seed (default: first configured seed)")

    p = sub.add_parser("account", help="print parameter placement and upload sizes")
    p.add_argument("config")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")

    sub.add_parser("defaults", help="print a config file with every default")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        if args.command == "defaults":
            sys.stdout.write(emit_config(ExperimentSpec()))
            return EXIT_OK
        if args.command == "report":
            try:
                sys.stdout.write(report_dir(args.dir))
            except ValueError as exc:
                print(f"error: {exc}", file=sys.stderr)
                return EXIT_RUN
            return EXIT_OK
        spec = parse_config(args.config, _overrides(args.overrides))
    except ConfigError as exc:
        for key, problem in exc.problems.items():
            print(f"config error: {key}: {problem}", file=sys.stderr)
        return EXIT_CONFIG

    if args.command == "account":
        report = communication_report(spec.federation)
        print(json.dumps(report, indent=2, sort_keys=True))
        return EXIT_OK

    if args.command == "partition":
        seed = args.seed if args.seed is not None else spec.seeds[0]
        datasets = build_client_datasets(spec.task, spec.federation.n_clients, spec.federation.alpha, seed, spec.split)
        path = Path(args.out) if args.out else resolve_output_dir(spec) / "datasets.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        export_datasets(datasets, path)
        print(path)
        return EXIT_OK

    out = Path(args.out) if args.out else None
    try:
        out = run_experiment(spec, out)
    except Exception as exc:  # noqa: BLE001 - any run failure maps to exit 1
        logging.getLogger("fednano").error("run failed: %s", exc)
        return EXIT_RUN
    sys.stdout.write((out / "report.txt").read_text(encoding="utf-8"))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
