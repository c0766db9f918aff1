"""Command-line entry point.

Exit codes: 0 success, 1 invalid config or input, 2 missing upstream stage,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from conceptmed import __version__
from conceptmed.errors import ConceptMedError, ConfigError, DependencyError, ModeError, ShapeError, SplitError
from conceptmed.pipeline import STAGES, Pipeline, PipelineConfig, load_config

EXIT_OK, EXIT_VALIDATION, EXIT_DEPENDENCY, EXIT_NUMERICAL = 0, 1, 2, 3

log = logging.getLogger("conceptmed")


def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON pipeline config (defaults apply when omitted)")
    p.add_argument("--seed", type=int, help="master seed; overrides the config")
    p.add_argument("--out", help="output directory; overrides the config")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="conceptmed", description="Concept-mediation explanations for a layered classifier.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log stage progress")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run every stage, or one stage with --stage")
    _common(run)
    run.add_argument("--stage", choices=STAGES, help="run only this stage")

    run_all = sub.add_parser("run-all", help="run every stage in order")
    _common(run_all)

    for stage in STAGES:
        _common(sub.add_parser(stage, help=f"run the {stage} stage"))

    show = sub.add_parser("show-config", help="print the effective config as JSON")
    _common(show)
    return parser


def _config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    changes = {}
    if args.seed is not None:
        if args.seed < 0:
            raise ConfigError("must be a non-negative integer", "seed")
        changes["seed"] = args.seed
    if args.out is not None:
        changes["out_dir"] = args.out
    return dataclasses.replace(cfg, **changes) if changes else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _config(args)
        if args.command == "show-config":
            import json
            print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
            return EXIT_OK
        pipe = Pipeline(cfg)
        stage = args.stage if args.command == "run" else args.command
        if stage in (None, "run-all"):
            pipe.run_all()
            print(f"report written to {pipe.out / 'report'}")
        else:
            pipe.run_stage(stage)
            print(f"stage {stage} done")
        return EXIT_OK
    except DependencyError as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except (ConfigError, ShapeError, SplitError, ModeError, FileNotFoundError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ConceptMedError, ArithmeticError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
