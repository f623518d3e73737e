"""``randviews`` command line: phantom, extract, train, score, eval, all."""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .cnn import DivergenceError
from .config import ConfigError, PipelineConfig, apply_overrides, load_config, to_text
from .formats import FormatError
from .phantom import PlacementError
from .volume import VolumeError

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

log = logging.getLogger("randviews")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="randviews", description="2.5D random-view CNN false-positive reduction on phantoms")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="global seed (overrides the config file)")
    common.add_argument("--threads", type=int, help="worker cap; results do not depend on it")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a single config key, repeatable")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    p = sub.add_parser("phantom", parents=[common], help="generate a synthetic cohort")
    p.add_argument("--patients", type=int, help="number of phantom patients")
    sub.add_parser("extract", parents=[common], help="extract training patches")
    sub.add_parser("train", parents=[common], help="train one CNN per cross-validation fold")
    sub.add_parser("score", parents=[common], help="score held-out candidates with their fold's model")
    sub.add_parser("eval", parents=[common], help="FROC/ROC/Fisher report from scores")
    a = sub.add_parser("all", parents=[common], help="run every stage")
    a.add_argument("--patients", type=int, help="number of phantom patients")
    sub.add_parser("config", parents=[common], help="print the effective config in canonical form")
    return parser


def resolve_config(args) -> PipelineConfig:
    cfg = load_config(args.config) if args.config else PipelineConfig()
    raw = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    if args.seed is not None:
        raw["seed"] = str(args.seed)
    if args.threads is not None:
        raw["threads"] = str(args.threads)
    if getattr(args, "patients", None) is not None:
        raw["cohort.n_patients"] = str(args.patients)
    return apply_overrides(cfg, raw)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"randviews: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        if args.command == "config":
            sys.stdout.write(to_text(cfg))
        elif args.command == "phantom":
            pipeline.run_phantom(cfg)
        elif args.command == "extract":
            pipeline.run_extract(cfg)
        elif args.command == "train":
            for fold, digest in enumerate(pipeline.run_train(cfg)):
                print(f"fold{fold} sha256 {digest}")
        elif args.command == "score":
            pipeline.run_score(cfg)
        elif args.command == "eval":
            pipeline.run_eval(cfg)
            sys.stdout.write((cfg.paths.resolve("reports") / "summary.txt").read_text())
        elif args.command == "all":
            pipeline.run_all(cfg)
            sys.stdout.write((cfg.paths.resolve("reports") / "summary.txt").read_text())
    except (DivergenceError, FloatingPointError) as exc:
        print(f"randviews: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, VolumeError, FormatError, PlacementError, pipeline.DataError, ValueError, KeyError) as exc:
        print(f"randviews: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
