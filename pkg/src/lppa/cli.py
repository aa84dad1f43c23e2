"""Command line entry point: ``lppa {run,sweep,attack,budget}``.

Exit codes: 0 success, 1 validation error, 2 a run diverged (artifacts are
still written), 3 I/O error.  ``LPPA_OUTPUT_DIR`` overrides the config's
output directory; ``--out`` overrides both.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace

from . import experiment as X
from .config import load_config, parse_number_list
from .exceptions import IngestionError, LPPAError

EXIT_OK, EXIT_VALIDATION, EXIT_DIVERGED, EXIT_IO = 0, 1, 2, 3
OUTPUT_ENV = "LPPA_OUTPUT_DIR"


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lppa", description="Simulate DSGT, DP and LPPA training, attacks and privacy budgets."
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="experiment JSON config")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seeds", help="comma separated seeds, e.g. 0,1,2")
        return p

    common(sub.add_parser("run", help="train every configured rule and write metrics"))
    sw = common(sub.add_parser("sweep", help="repeat run over a list of noise scales"))
    sw.add_argument("--beta-list", required=True)
    sw.add_argument("--attack", action="store_true", help="also attack each run")
    at = common(sub.add_parser("attack", help="gradient-inversion attack on a victim"))
    at.add_argument("--victim", type=int)
    at.add_argument("--target-round", type=int)
    bu = common(sub.add_parser("budget", help="per-round privacy budgets"))
    bu.add_argument("--t-max", type=int, required=True)
    return parser


def resolve(args):
    cfg = load_config(args.config)
    if args.seeds:
        cfg = replace(cfg, seeds=parse_number_list(args.seeds, int))
    if getattr(args, "victim", None) is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, victim=args.victim))
    if getattr(args, "target_round", None) is not None:
        cfg = replace(cfg, attack=replace(cfg.attack, target_round=args.target_round))
    out = args.out or os.environ.get(OUTPUT_ENV) or cfg.output_dir
    cfg = replace(cfg, output_dir=out).validate()
    return cfg, out


def dispatch(args) -> int:
    cfg, out = resolve(args)
    if args.command == "run":
        summary = X.cmd_run(cfg, out)
        for rule, entry in summary["rules"].items():
            print(f"{rule:5s} accuracy {entry['mean']:.4f} +- {entry['std']:.4f}  loss_pp {entry['loss_pp']}")
        return EXIT_DIVERGED if summary["any_diverged"] else EXIT_OK
    if args.command == "sweep":
        summary = X.cmd_sweep(cfg, parse_number_list(args.beta_list), out, with_attack=args.attack)
        return EXIT_DIVERGED if summary["any_diverged"] else EXIT_OK
    if args.command == "attack":
        report = X.cmd_attack(cfg, out)
        for rule, entry in report["rules"].items():
            print(f"{rule:5s} median mse {entry['median_mse']}")
        diverged = any(p["diverged"] for e in report["rules"].values() for p in e["per_seed"])
        return EXIT_DIVERGED if diverged else EXIT_OK
    if args.command == "budget":
        X.cmd_budget(cfg, args.t_max, out)
        return EXIT_OK
    raise AssertionError(args.command)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return dispatch(args)
    except (OSError, IngestionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except LPPAError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
