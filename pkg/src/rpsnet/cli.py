"""Command-line entry point: ``rpsnet run --config FILE [...]``."""
from __future__ import annotations

import argparse
import logging
import sys

from . import kernels
from .harness import MODES, ConfigError, emit_config, parse_config, run_experiment, with_overrides


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rpsnet", description="Class-incremental learning with random path selection.")
    sub = p.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one experiment and write its artifacts")
    run.add_argument("--config", required=True, help="YAML experiment config")
    run.add_argument("--mode", choices=MODES)
    run.add_argument("--seed", type=int)
    run.add_argument("--out", help="output directory (overrides the config)")
    run.add_argument("--epochs", type=int)
    run.add_argument("--candidates", type=int)
    run.add_argument("--threshold", type=float, help="saturation threshold; 'inf' disables switching")
    run.add_argument("--gamma", type=float)
    run.add_argument("-q", "--quiet", action="store_true")
    show = sub.add_parser("show-config", help="print a config with all defaults filled in")
    show.add_argument("--config", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if getattr(args, "quiet", False) else logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = parse_config(args.config)
        if args.command == "show-config":
            sys.stdout.write(emit_config(cfg))
            return 0
        cfg = with_overrides(cfg, mode=args.mode, seed=args.seed, out=args.out, epochs=args.epochs,
                             candidates=args.candidates, threshold=args.threshold, gamma=args.gamma)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    logging.getLogger(__name__).info("kernels: %s", "compiled" if kernels.COMPILED else "numpy fallback")
    try:
        return run_experiment(cfg)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
