"""Command-line entry point: ``respagent <subcommand> --config <path>``."""

from __future__ import annotations

import argparse
import json
import logging
import sys

from ..errors import ConfigError
from .experiments import EXPERIMENTS, load_config, run_experiment

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="respagent", description="Desk-scale respiratory agent experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name, help=f"run the {name} experiment")
        p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="output directory")
    return parser


def _error(kind: str, message: str, **extra) -> None:
    print(json.dumps({"error": kind, "message": message, **extra}, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        cfg = load_config(args.config)
        if cfg["experiment"] != args.command:
            raise ConfigError(f"config is for {cfg['experiment']!r}, not {args.command!r}", "$.experiment")
        manifest = run_experiment(cfg, out_dir=args.out, seed=args.seed)
    except ConfigError as exc:
        _error("config", str(exc), path=exc.path)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        _error("config", f"cannot read config: {exc}", path="$")
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001
        _error(type(exc).__name__, str(exc))
        return EXIT_FAILURE
    print(json.dumps({"experiment": manifest["experiment"], "config_digest": manifest["config_digest"],
                      "results": sorted(manifest["results"])}, sort_keys=True))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
