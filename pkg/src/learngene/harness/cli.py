"""Command-line entry point.

Exit codes: 0 success, 2 config validation failure, 3 numeric abort
(non-finite values), 4 I/O or file corruption.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

from learngene.harness import experiments
from learngene.harness.checkpoint import CheckpointError, inspect_checkpoint
from learngene.harness.config import ConfigError, RunConfig, load_config
from learngene.numcore import NumericError

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _build_parser():
    parser = argparse.ArgumentParser(
        prog="learngene",
        description="Condense common layers out of an ancestry network and "
                    "grow compact descendants from them.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_run_flags(p):
        p.add_argument("--config", help="INI run configuration")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", help="override the output directory")

    p = sub.add_parser("pipeline", help="train, condense, inherit, fine-tune")
    add_run_flags(p)

    p = sub.add_parser("compare", help="fine-tune one descendant per method")
    add_run_flags(p)
    p.add_argument("--methods", help="comma-separated method subset")
    p.add_argument("--trials", type=int, default=5, help="comparison seeds")

    p = sub.add_parser("sweep", help="lr x weight-decay sensitivity grid")
    add_run_flags(p)
    p.add_argument("--methods", help="comma-separated method subset")

    p = sub.add_parser("evolution", help="sequential-task learngene evolution")
    add_run_flags(p)
    p.add_argument("--trials", type=int, default=25, help="number of tasks")

    p = sub.add_parser("stability", help="planted-structure selection stability")
    add_run_flags(p)
    p.add_argument("--trials", type=int, default=10, help="condensation trials")

    p = sub.add_parser("inspect-checkpoint", help="print a checkpoint summary")
    p.add_argument("path", help="checkpoint file")
    return parser


def _resolve_config(args):
    config = load_config(args.config) if args.config else RunConfig().validate()
    updates = {}
    if getattr(args, "seed", None) is not None:
        updates["seed"] = args.seed
    if getattr(args, "out", None) is not None:
        updates["out"] = args.out
    if updates:
        config = dataclasses.replace(config, **updates).validate()
    return config


def main(argv=None):
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "inspect-checkpoint":
            summary = inspect_checkpoint(args.path)
            print(json.dumps(summary, indent=2, sort_keys=True, default=str))
            return EXIT_OK

        config = _resolve_config(args)
        if args.command == "pipeline":
            payload = experiments.cmd_pipeline(config)
        elif args.command == "compare":
            methods = args.methods.split(",") if args.methods else None
            payload = experiments.cmd_compare(config, methods=methods,
                                              seeds=args.trials)
        elif args.command == "sweep":
            methods = (tuple(args.methods.split(","))
                       if args.methods else ("auto-learngene", "from-scratch"))
            payload = experiments.cmd_sweep(config, methods=methods)
        elif args.command == "evolution":
            payload = experiments.cmd_evolution(config, num_tasks=args.trials)
        elif args.command == "stability":
            payload = experiments.cmd_stability(config, trials=args.trials)
        else:  # pragma: no cover - argparse enforces the choices
            raise ValueError(f"unhandled command {args.command!r}")
        print(json.dumps(payload, indent=2, sort_keys=True))
        return EXIT_OK
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (CheckpointError, OSError) as e:
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except experiments.StageError as e:
        cause = e.__cause__
        if isinstance(cause, NumericError):
            print(f"numeric abort: {e}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(cause, (CheckpointError, OSError)):
            print(f"i/o error: {e}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG if isinstance(cause, ValueError) else 1
    except ValueError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
