"""Command-line entry point.

Every subcommand accepts ``--config FILE`` plus one ``--<key>`` flag per
run-config key (dashes or underscores); flags override the file.  Failures
exit nonzero after printing a single ``error=<category> message=<text>``
line on stderr.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields

from . import pipeline
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .corpus import CorpusError
from .decode import DecodeError
from .masking import MaskingError
from .model import ModelError
from .numerics import CheckpointFormatError, NumericsError
from .objectives import ObjectiveError
from .scoring import ScoringError

# most specific first
_CATEGORIES = (
    (ConfigError, "config"),
    (CheckpointFormatError, "checkpoint"),
    (pipeline.TrainingDiverged, "diverged"),
    (CorpusError, "corpus"),
    (ScoringError, "scoring"),
    (DecodeError, "decode"),
    (ModelError, "model"),
    (ObjectiveError, "objective"),
    (MaskingError, "vocabulary"),
    (NumericsError, "numerics"),
    (pipeline.PipelineError, "pipeline"),
    (OSError, "io"),
)

COMMANDS = ("gen-data", "train", "mwe-train", "decode", "score", "rtf")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="csnat", description="Code-switching Mask-CTC NAT toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "gen-data": "generate the synthetic corpus",
        "train": "cross-entropy training",
        "mwe-train": "MWE fine-tuning from init_checkpoint",
        "decode": "decode a split and write hypotheses plus an RTF report",
        "score": "score a hypothesis file against a split",
        "rtf": "single-thread decoding speed benchmark",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name])
        p.add_argument("--config", metavar="FILE", help="key = value run configuration")
        for f in fields(RunConfig):
            flag = "--" + f.name.replace("_", "-")
            alias = "--" + f.name
            names = [flag] if flag == alias else [flag, alias]
            p.add_argument(*names, dest=f.name, metavar="VALUE", default=None)
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig) if getattr(args, f.name) is not None}
    return apply_overrides(cfg, overrides)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command is None:
        raise ConfigError(f"missing command, expected one of {', '.join(COMMANDS)}")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = resolve_config(args)
    if args.command == "gen-data":
        pipeline.run_gen_data(cfg)
        print(f"corpus={cfg.corpus_dir}")
    elif args.command == "train":
        print(f"checkpoint={pipeline.run_train(cfg)}")
    elif args.command == "mwe-train":
        print(f"checkpoint={pipeline.run_mwe_train(cfg)}")
    elif args.command == "decode":
        hyp, rtf = pipeline.run_decode(cfg)
        print(f"hypotheses={hyp}\nrtf_report={rtf}")
    elif args.command == "score":
        path = pipeline.run_score(cfg)
        sys.stdout.write(path.read_text(encoding="utf-8"))
    elif args.command == "rtf":
        path = pipeline.run_rtf(cfg)
        sys.stdout.write(path.read_text(encoding="utf-8"))
    return 0


def error_category(exc: BaseException) -> str:
    for cls, name in _CATEGORIES:
        if isinstance(exc, cls):
            return name
    return "internal"


def main(argv=None) -> int:
    try:
        return run(argv)
    except KeyboardInterrupt:
        print("error=interrupted message=interrupted", file=sys.stderr)
        return 130
    except Exception as exc:  # noqa: BLE001 - every failure becomes one machine-readable line
        message = " ".join(str(exc).split()) or type(exc).__name__
        print(f"error={error_category(exc)} message={message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
