"""Command line entry point: ``weakgas <experiment> --config path [--seed N] [--workers K] [--out dir]``."""

from __future__ import annotations

import argparse
import sys

from .harness import EXIT_CONFIG, EXPERIMENTS, load_config, run_experiment
from .model import ConfigError


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="weakgas", description=__doc__)
    sub = p.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        s = sub.add_parser(name, help=f"run the {name} experiment")
        s.add_argument("--config", required=True, help="experiment file (TOML or JSON)")
        s.add_argument("--seed", type=int, default=None, help="override the seed in the file")
        s.add_argument("--workers", type=int, default=1, help="worker processes for independent chains")
        s.add_argument("--out", default=None, help="output directory")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.experiment)
        if args.seed is not None:
            if args.seed < 0:
                raise ConfigError("seed must be non-negative")
            cfg.seed = args.seed
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        rec = run_experiment(cfg, workers=max(1, args.workers), out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    counts = {}
    for v in rec.verdicts:
        key = ("control " if v.control else "") + v.verdict
        counts[key] = counts.get(key, 0) + 1
    summary = ", ".join(f"{k}: {n}" for k, n in sorted(counts.items()))
    print(f"{rec.experiment}: {rec.status} ({summary}) in {rec.wall_time:.1f}s")
    for v in rec.verdicts:
        if (v.verdict != "pass") != v.control:
            print(f"  {v.verdict:12s} {v.claim}  statistic={v.statistic:.4g}  [{v.threshold}]")
    return rec.exit_code


if __name__ == "__main__":
    sys.exit(main())
