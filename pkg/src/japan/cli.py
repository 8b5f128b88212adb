"""Command line entry point: ``japan run|sweep|compare|gen``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from japan import data as dt
from japan import experiment as ex

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="japan", description="Conformal density regions with normalizing flows.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="train, calibrate and evaluate every configured cell")
    run.add_argument("--config", required=True)
    run.add_argument("--out", help="output directory (overrides output_dir)")
    run.add_argument("--cache-dir", help="cache generated datasets as CSV here")

    sweep = sub.add_parser("sweep", help="calibration curve over the configured epsilon grid")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--out")
    sweep.add_argument("--cache-dir")

    cmp_ = sub.add_parser("compare", help="summarize a results CSV across seeds")
    cmp_.add_argument("--results", required=True)
    cmp_.add_argument("--out", help="also write the summary as CSV")

    gen = sub.add_parser("gen", help="write a toy dataset to CSV")
    gen.add_argument("--toy", required=True, choices=dt.TOY_NAMES + ("conditional",))
    gen.add_argument("--n", type=int, default=10_000)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--noise", type=float, default=0.05)
    gen.add_argument("--out", required=True)
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "gen":
            if args.toy == "conditional":
                ds = dt.generate_conditional(args.n, args.seed)
            else:
                ds = dt.generate_toy(dt.ToySpec(args.toy, args.n, args.noise, args.seed))
            dt.write_csv(ds, args.out)
            return EXIT_OK
        if args.command == "compare":
            summary = ex.compare(args.results)
            sys.stdout.write(ex.format_summary(summary))
            if args.out:
                ex.write_summary(summary, args.out)
            return EXIT_OK
        cfg = ex.load_config(args.config)
        if args.command == "run":
            ex.run(cfg, args.out, echo=sys.stdout, cache_dir=args.cache_dir)
        else:
            curve = ex.sweep(cfg, args.out, echo=sys.stdout, cache_dir=args.cache_dir)
            for pt in curve:
                print(f"{pt.method}\t{pt.epsilon:g}\t{pt.coverage:.4f}\t{pt.area:.6g}")
        return EXIT_OK
    except (ex.ConfigError, dt.DataError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any runtime failure maps to exit code 2
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    raise SystemExit(main())
