"""Command line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing upstream artifact, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import STAGES, load_config
from .engine import CheckpointError, ConfigError, DependencyError, NumericError
from .pipeline import Run, run_pipeline, run_stage

EXIT_OK, EXIT_CONFIG, EXIT_DEPENDENCY, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardioalign", description="Multimodal ECG/CMR/tabular pretraining pipeline")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file (merged over the preset)")
    common.add_argument("--preset", default="desk", help="base preset: desk or paper (default: desk)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config key by dotted path, e.g. --set mae.epochs=2")
    common.add_argument("--runs", default="runs", help="root directory for run outputs")
    common.add_argument("--name", help="run name (default: from config)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--task", choices=("mi", "stroke"), help="downstream label")
    common.add_argument("--upstream", help="another run whose artifacts may satisfy dependencies")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for stage in STAGES:
        sp = sub.add_parser(stage, parents=[common], help=f"run the {stage} stage")
        if stage in ("finetune", "evaluate"):
            sp.add_argument("--from-scratch", action="store_true", help="randomly initialised signal encoders")
            sp.add_argument("--init", choices=("align", "mae", "scratch"), help="encoder initialisation")
    sp = sub.add_parser("pipeline", parents=[common], help="run every configured stage in order")
    sp.add_argument("--from-scratch", action="store_true")
    sp.add_argument("--init", choices=("align", "mae", "scratch"))
    return p


def resolve(args) -> dict:
    overrides = list(args.overrides)
    for key, val in (("name", args.name), ("seed", args.seed), ("task", args.task), ("upstream", args.upstream)):
        if val is not None:
            overrides.append(f"{key}={val}" if key == "seed" else f'{key}="{val}"')
    init = getattr(args, "init", None)
    if getattr(args, "from_scratch", False):
        init = "scratch"
    if init is not None:
        overrides.append(f'init="{init}"')
    return load_config(args.config, args.preset, overrides)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve(args)
        if args.command == "pipeline":
            results = run_pipeline(cfg, args.runs)
            report = results.get("evaluate")
        else:
            report = run_stage(Run(cfg, args.runs), args.command)
        if args.command in ("evaluate", "pipeline") and report is not None:
            print(report.to_json())
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DependencyError, CheckpointError) as exc:
        print(f"dependency error: {exc}", file=sys.stderr)
        return EXIT_DEPENDENCY
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
