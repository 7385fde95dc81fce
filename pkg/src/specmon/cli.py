"""Command-line experiment runner.

Exit codes: 0 success, 1 configuration error, 2 runtime divergence.
The SPECMON_OUT environment variable overrides --out.
"""

from __future__ import annotations

import argparse
import os
import sys

from .dan import TrainingDiverged
from .env import SpecValidationError
from .experiments import ConfigError, run_experiment


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="specmon",
        description="Run a spectrum-monitoring experiment from a JSON config.")
    parser.add_argument("--config", required=True, help="experiment config path")
    parser.add_argument("--out", default=None, help="artifact directory")
    parser.add_argument("--seed-override", type=int, default=None,
                        help="replace the config's training seed")
    parser.add_argument("--log-episodes", action="store_true", default=None,
                        help="write per-episode CSV logs")
    parser.add_argument("--threads", type=int, default=None,
                        help="episode-parallel evaluation threads")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    out = os.environ.get("SPECMON_OUT") or args.out
    try:
        artifact_dir = run_experiment(
            args.config, out_dir=out, seed_override=args.seed_override,
            log_episodes=args.log_episodes, threads=args.threads)
    except (ConfigError, SpecValidationError, FileNotFoundError) as exc:
        print(f"specmon: config error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"specmon: training diverged: {exc}", file=sys.stderr)
        return 2
    print(artifact_dir)
    return 0


if __name__ == "__main__":
    sys.exit(main())
