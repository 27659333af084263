"""Command line: ``utrlab {attack,defense-sweep,hparam-sweep,capacity}``.

Exit codes: 0 on success, 1 for a configuration error, 2 for a failure while running.
"""

from __future__ import annotations

import argparse
import sys

from . import experiments
from .experiments import ConfigError

COMMANDS = {
    "attack": experiments.cmd_attack,
    "defense-sweep": experiments.cmd_defense_sweep,
    "hparam-sweep": experiments.cmd_hparam_sweep,
    "capacity": experiments.cmd_capacity,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="utrlab", description="Adapter gradient inversion experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="TOML experiment config")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                       help="dotted key, e.g. model.reduction_factor=4 (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 0 if e.code == 0 else 1
    try:
        cfg = experiments.load_config(args.config, args.override, seed=args.seed, output_dir=args.out)
    except ConfigError as e:
        print(f"utrlab: config error: {e}", file=sys.stderr)
        return 1
    try:
        path = COMMANDS[args.command](cfg)
    except ConfigError as e:
        print(f"utrlab: config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - every runtime failure maps to exit code 2
        print(f"utrlab: {args.command} failed: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
