"""Command line entry point.

    asd train-asd --config configs/desk_badnets.yaml --out runs/badnets
    asd train-nodefense --config configs/desk_badnets.yaml
    asd eval --config configs/desk_badnets.yaml --resume runs/badnets/checkpoints/epoch_0035.pt
    asd plot --out runs/badnets
    asd poison --config configs/desk_badnets.yaml --out runs/poisoned
"""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import ConfigError, config_from_dict, override, parse_config
from .experiment import run_experiment

COMMANDS = ("poison", "train-asd", "train-nodefense", "eval", "plot")


def build_parser():
    p = argparse.ArgumentParser(prog="asd", description="Backdoor defense by adaptive dataset splitting.")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML experiment config (plot needs only --out)")
        s.add_argument("--out", help="run directory (overrides output_dir in the config)")
        s.add_argument("--seed", type=int, help="override the training seed")
        s.add_argument("--resume", nargs="?", const=True, default=None,
                       help="train-asd: continue from the latest checkpoint; eval: checkpoint path")
        s.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        if args.config:
            cfg = parse_config(args.config)
        elif args.command == "plot":
            cfg = config_from_dict({})
        else:
            print(f"asd {args.command}: --config is required", file=sys.stderr)
            return 2
        cfg = override(cfg, mode=args.command, seed=args.seed)
    except (ConfigError, FileNotFoundError) as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2

    resume = args.resume is True
    checkpoint = args.resume if isinstance(args.resume, str) else None
    if checkpoint and args.command == "train-asd":
        print("train-asd --resume takes no path; it continues from the run directory", file=sys.stderr)
        return 2
    try:
        status, summary = run_experiment(cfg, out=args.out, resume=resume, checkpoint=checkpoint)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    if summary is not None:
        print(json.dumps(summary, indent=2, sort_keys=True))
    return status


if __name__ == "__main__":
    sys.exit(main())
