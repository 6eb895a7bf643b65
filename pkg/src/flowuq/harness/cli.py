"""Command-line entry point.

    flowuq [--config PATH] [--seed U64] [--out DIR] <command> [options]

Commands: ``train-supervised``, ``train-unsupervised --init MODE``,
``compare``, ``report``. Exit codes: 0 success, 2 configuration error,
3 numeric abort, 4 I/O or checkpoint error.
"""
from __future__ import annotations

import argparse
import sys

from ..errors import CheckpointError, ConfigError, NumericError
from .config import MODES, ExperimentConfig, load_config
from .pipeline import load_supervised, run_compare, run_report, run_supervised, run_unsupervised, write_config

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4


def _u64(text: str) -> int:
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return value


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="key = value config file")
    parser.add_argument("--seed", type=_u64, metavar="U64", default=default, help="base seed override")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory override")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="flowuq", description="Amortised and per-observation flow posteriors.")
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train-supervised", help="train the conditional flow T by forward KL")
    _global_flags(p, suppress=True)

    p = sub.add_parser("train-unsupervised", help="fit per-observation samplers by reverse KL")
    _global_flags(p, suppress=True)
    p.add_argument("--init", choices=MODES, required=True, help="initialisation mode")
    p.add_argument("--index", type=int, action="append", metavar="K",
                   help="observation index (repeatable; default: the config's seeds)")
    p.add_argument("--checkpoint", metavar="PATH", help="T checkpoint (default: OUT/supervised/T.ckpt)")

    p = sub.add_parser("compare", help="iterations-to-threshold table over finished runs")
    _global_flags(p, suppress=True)
    p = sub.add_parser("report", help="write OUT/report.md")
    _global_flags(p, suppress=True)
    return parser


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(seed=args.seed, out=args.out).validate()


def _dispatch(args) -> None:
    cfg = _resolve_config(args)
    if args.command == "train-supervised":
        res = run_supervised(cfg)
        print(f"T checkpoint {res.checkpoint} sha256 {res.digest}")
    elif args.command == "train-unsupervised":
        write_config(cfg, cfg.out)
        sup = load_supervised(cfg, args.checkpoint)
        for index in args.index or cfg.seeds:
            res = run_unsupervised(cfg, sup, args.init, index)
            summary = ", ".join(f"{k} {v:.4g}" for k, v in sorted(res.metrics.items()))
            print(f"{args.init}-{index}: {summary}")
    elif args.command == "compare":
        _, medians = run_compare(cfg)
        for mode, ratio in sorted(medians.items()):
            print(f"{mode}: median ratio {ratio:.3f}")
    elif args.command == "report":
        print(run_report(cfg))


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        _dispatch(args)
    except ConfigError as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return EXIT_NUMERIC
    except CheckpointError as err:
        print(f"checkpoint error: {err}", file=sys.stderr)
        return EXIT_IO
    except OSError as err:
        print(f"I/O error: {err}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
