"""Command-line entry point.

Every subcommand takes --config pointing at a run config file; stage
commands add --force (redo existing outputs) and --limit (first N instances
by id). Exit codes: 0 all scheduled work completed, 1 partial failure,
2 bad configuration or arguments.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path
from typing import Sequence

from patchpool.cli.commands import (
    CommandReport,
    cmd_analyze,
    cmd_context,
    cmd_costs,
    cmd_ensemble_select,
    cmd_generate,
    cmd_select,
)
from patchpool.cli.config import ConfigError, load_config


def _int_list(raw: str) -> list[int]:
    return [int(part) for part in raw.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="patchpool",
        description="Resolve repository issues by sampling tested candidate edits.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def stage(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, type=Path, help="run config JSON")
        p.add_argument("--force", action="store_true", help="redo existing outputs")
        p.add_argument("--limit", type=int, default=None, help="first N instances by id")
        return p

    stage("context", "scan, rank, and assemble codebase context")
    stage("generate", "run testing+editing machine pairs and build candidate pools")

    p_select = stage("select", "vote over candidates and pick one edit per instance")
    p_select.add_argument(
        "--method",
        default="machine_top3",
        choices=["majority", "model", "model_top3", "machine_top3"],
        help="selection method (default machine_top3)",
    )

    p_ensemble = stage("ensemble-select", "select over native plus external candidate pools")
    p_ensemble.add_argument(
        "--predictions",
        nargs="+",
        required=True,
        type=Path,
        help="external prediction files ({instance_id, patch} records)",
    )
    p_ensemble.add_argument(
        "--native-method",
        default="machine_top3",
        help="which stored selection supplies the native candidate",
    )

    p_analyze = sub.add_parser("analyze", help="compute recall/coverage/score reports")
    p_analyze.add_argument("--config", required=True, type=Path)
    p_analyze.add_argument("--limit", type=int, default=None)
    p_analyze.add_argument("--sweep-ks", type=_int_list, default=None, help="e.g. 1,3,10")
    p_analyze.add_argument(
        "--sweep-iterations", type=_int_list, default=None, help="e.g. 1,2,4,8"
    )

    p_costs = sub.add_parser("costs", help="recompute the cost ledger from the store")
    p_costs.add_argument("--config", required=True, type=Path)
    p_costs.add_argument("--limit", type=int, default=None)

    p_fixtures = sub.add_parser(
        "make-fixtures", help="write the bundled demo dataset, playbooks, and config"
    )
    p_fixtures.add_argument("--out", required=True, type=Path, help="output directory")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )

    if args.command == "make-fixtures":
        from patchpool.fixtures import write_fixture_corpus

        config_path = write_fixture_corpus(args.out)
        print(f"fixture corpus written; config at {config_path}")
        return 0

    try:
        config = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2

    try:
        if args.command == "context":
            report = cmd_context(config, force=args.force, limit=args.limit)
        elif args.command == "generate":
            report = cmd_generate(config, force=args.force, limit=args.limit)
        elif args.command == "select":
            report = cmd_select(config, args.method, force=args.force, limit=args.limit)
        elif args.command == "ensemble-select":
            report = cmd_ensemble_select(
                config,
                args.predictions,
                native_method=args.native_method,
                force=args.force,
                limit=args.limit,
            )
        elif args.command == "analyze":
            report = cmd_analyze(
                config,
                limit=args.limit,
                sweep_ks=args.sweep_ks,
                sweep_iterations=args.sweep_iterations,
            )
        elif args.command == "costs":
            report = cmd_costs(config, limit=args.limit)
        else:  # pragma: no cover - argparse enforces choices
            raise AssertionError(args.command)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2

    print(report.render())
    return report.exit_code()


if __name__ == "__main__":
    raise SystemExit(main())
