"""Shared argument handling for the experiment scripts."""

import argparse
import sys
from pathlib import Path

from fedrisk.harness import config_from_dict, report, run_preset


def run(preset: str, description: str, extra: dict | None = None) -> Path:
    parser = argparse.ArgumentParser(description=description)
    parser.add_argument("--out", default=f"results/{preset}")
    parser.add_argument("--seed", type=int, default=0, help="master seed; repetition i uses seed + i")
    parser.add_argument("--reps", type=int, default=5)
    parser.add_argument("--rounds", type=int, default=100)
    parser.add_argument("--n", type=int, default=20000, help="synthetic dataset size")
    parser.add_argument("--threads", type=int, default=None, help="parallel repetitions (default FEDRISK_THREADS)")
    args = parser.parse_args()

    raw = {
        "preset": preset,
        "master_seed": args.seed,
        "repetitions": args.reps,
        "generator": {"n": args.n},
        "federation": {"T": args.rounds},
        **(extra or {}),
    }
    paths = run_preset(config_from_dict(raw), Path(args.out), threads=args.threads)
    for name, path in paths.items():
        print(f"{name}: {path}", file=sys.stderr)
    sys.stdout.write(report(args.out, "csv"))
    return Path(args.out)
