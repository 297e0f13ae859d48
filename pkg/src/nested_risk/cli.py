"""Command-line entry point: run | gen-portfolio | oracle."""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace

from .experiments import ConfigError, build_portfolio, load_config, problem_for_oracle, run_experiment
from .mlmc import nested_brute_force
from .portfolio import read_manifest, write_manifest

EXIT_OK, EXIT_CONFIG, EXIT_UNREACHABLE, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("nested_risk")


def _parser():
    ap = argparse.ArgumentParser(prog="nested-risk", description="MLMC estimation of portfolio loss probabilities.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    run = sub.add_parser("run", help="sweep method variants over a tolerance grid and write CSV")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--jobs", type=int)
    run.add_argument("--out")

    gen = sub.add_parser("gen-portfolio", help="generate (and calibrate) a portfolio manifest")
    gen.add_argument("--config", required=True)
    gen.add_argument("--out", required=True)

    orc = sub.add_parser("oracle", help="plain nested Monte Carlo on a manifest")
    orc.add_argument("--portfolio", required=True)
    orc.add_argument("--outer", type=int, default=200_000)
    orc.add_argument("--inner", type=int, default=1024)
    orc.add_argument("--seed", type=int, default=0)
    orc.add_argument("--jobs", type=int)
    return ap


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    changes = {k: v for k, v in (("seed", args.seed), ("jobs", args.jobs), ("output", args.out)) if v is not None}
    cfg = replace(cfg, **changes)

    def progress(rec):
        log.info("%s tol=%g eta=%.6f se=%.2e work=%.3e %s", rec.variant, rec.tol, rec.eta_estimate, rec.std_error,
                 rec.total_work, rec.status)

    records = run_experiment(cfg, progress=progress)
    if records and all(r.status.startswith("unreachable") for r in records):
        return EXIT_UNREACHABLE
    return EXIT_OK


def _cmd_gen(args) -> int:
    cfg = load_config(args.config)
    portfolio, market = build_portfolio(cfg)
    write_manifest(args.out, portfolio, market)
    log.info("wrote %d options, threshold %.6g, to %s", portfolio.size, portfolio.threshold, args.out)
    return EXIT_OK


def _cmd_oracle(args) -> int:
    portfolio, market = read_manifest(args.portfolio)
    est, se = nested_brute_force(problem_for_oracle(portfolio, market), args.outer, args.inner, args.seed, args.jobs)
    print(f"eta_estimate,std_error\n{est:.10f},{se:.10f}")
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handler = {"run": _cmd_run, "gen-portfolio": _cmd_gen, "oracle": _cmd_oracle}[args.cmd]
    try:
        return handler(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        # manifests that fail to parse are input errors, unreadable files are I/O errors
        if isinstance(exc, OSError):
            print(f"I/O error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
