"""``fedrisk`` command line: gen-data, run, report."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys

from .data import MARKETS, GeneratorConfig, generate, write_csv
from .errors import ConfigError, FedRiskError
from .harness import load_config, report, run_preset

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _u64(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedrisk", description="Federated risk-model simulator")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen-data", help="write a synthetic dataset as CSV")
    gen.add_argument("--out", required=True)
    gen.add_argument("--seed", type=_u64, default=0)
    gen.add_argument("--n", type=int, default=20000)
    gen.add_argument("--markets", nargs="+", choices=MARKETS, default=list(MARKETS))
    gen.add_argument("--systemic-rate", type=float, default=0.05)

    run = sub.add_parser("run", help="run an experiment preset from a JSON config")
    run.add_argument("--config", required=True)
    run.add_argument("--out", required=True)
    run.add_argument("--seed", type=_u64, default=None, help="override master_seed")

    rep = sub.add_parser("report", help="summarize a results directory")
    rep.add_argument("--in", dest="in_dir", required=True)
    rep.add_argument("--format", choices=("csv", "json"), default="csv")
    return parser


def _gen_data(args) -> None:
    mix = {m: 1.0 / len(args.markets) for m in args.markets}
    # Keep the mix summing to one exactly.
    last = args.markets[-1]
    mix[last] = 1.0 - sum(v for m, v in mix.items() if m != last)
    cfg = GeneratorConfig(n=args.n, seed=args.seed, market_mix=mix, systemic_event_rate=args.systemic_rate)
    write_csv(generate(cfg), args.out)


def _run(args) -> None:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, master_seed=args.seed)
    paths = run_preset(cfg, args.out)
    for name, path in paths.items():
        print(f"{name}: {path}")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "gen-data":
            _gen_data(args)
        elif args.command == "run":
            _run(args)
        else:
            sys.stdout.write(report(args.in_dir, args.format))
    except ConfigError as exc:
        for problem in exc.problems:
            print(f"config error: {problem}", file=sys.stderr)
        return EXIT_CONFIG
    except (FedRiskError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
