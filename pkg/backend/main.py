"""
Prosody toolkit - command-line entry point
Corpus preparation, two-stage training, inference, evaluation and contour export
for discourse-level prosody prediction.

Exit codes: 0 success, 1 validation failure, 2 usage error.
"""

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

from dotenv import load_dotenv

from prosody.commands import (
    EXIT_FAILURE,
    EXIT_USAGE,
    BaseCommand,
    CommandOrchestrator,
    CompareCommand,
    EvalCommand,
    GenerateCommand,
    InferCommand,
    PlotPitchCommand,
    PrepareCommand,
    TrainCommand,
)
from prosody.config import ABLATION_FLAGS, load_config
from prosody.errors import ProsodyError, UsageError
from prosody.logging_setup import configure_logging

# Load environment variables (PROSO_SEED, PROSO_LOG_LEVEL)
load_dotenv()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proso", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--config", type=Path, default=None, help="TOML config file (defaults when omitted)")
    parser.add_argument("--log-level", default=None, help="overrides PROSO_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    prepare = sub.add_parser("prepare", help="build per-utterance feature files")
    prepare.add_argument("--manifest", type=Path, required=True)
    prepare.add_argument("--frames-dir", type=Path, required=True)
    prepare.add_argument("--align-dir", type=Path, required=True)
    prepare.add_argument("--lpe-dir", type=Path, required=True)
    prepare.add_argument("--out", type=Path, required=True, dest="out_dir")

    train = sub.add_parser("train", help="train stage 1 or stage 2")
    train.add_argument("--stage", type=int, choices=(1, 2), required=True)
    train.add_argument("--corpus", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--init-from", type=Path, default=None, help="stage-1 checkpoint (stage 2 only)")
    train.add_argument("--ablation", action="append", choices=ABLATION_FLAGS, default=None)

    infer = sub.add_parser("infer", help="predict feature files from text")
    infer.add_argument("--checkpoint", type=Path, required=True)
    infer.add_argument("--manifest", type=Path, required=True)
    infer.add_argument("--speaker", type=int, default=None)
    infer.add_argument("--out", type=Path, required=True, dest="out_dir")

    evaluate = sub.add_parser("eval", help="score predictions against targets")
    evaluate.add_argument("--predictions", type=Path, required=True)
    evaluate.add_argument("--targets", type=Path, required=True)
    evaluate.add_argument("--out", type=Path, default=None, dest="out_dir")

    plot = sub.add_parser("plot-pitch", help="export a per-phoneme pitch contour table")
    plot.add_argument("feature_file", type=Path)
    plot.add_argument("--manifest", type=Path, default=None)
    plot.add_argument("--out", type=Path, required=True, dest="out_csv")

    generate = sub.add_parser("generate", help="write a synthetic corpus")
    generate.add_argument("--out", type=Path, required=True, dest="out_dir")
    generate.add_argument("--discourses", type=int, default=None)
    generate.add_argument("--utterances", type=int, default=None)
    generate.add_argument("--vocab-size", type=int, default=None)
    generate.add_argument("--phonemes", type=int, default=None)
    generate.add_argument("--speakers", type=int, default=None)
    generate.add_argument("--styles", type=int, default=None)
    generate.add_argument("--law", default=None,
                          choices=("word_dependent", "phoneme_dependent", "context_offset", "mixed"))
    generate.add_argument("--seed", type=int, default=None)

    compare = sub.add_parser("compare", help="ablation table over several prediction directories")
    compare.add_argument("runs", nargs="+", help="NAME=PREDICTIONS_DIR")
    compare.add_argument("--targets", type=Path, required=True)
    compare.add_argument("--out", type=Path, required=True, dest="out_csv")

    pipeline = sub.add_parser("pipeline", help="generate, prepare, train both stages, infer and evaluate")
    pipeline.add_argument("--work-dir", type=Path, required=True)
    pipeline.add_argument("--workflow", default="full_pipeline", choices=("full_pipeline", "ablation_study"))
    pipeline.add_argument("--corpus-dir", type=Path, default=None, help="existing corpus (ablation_study)")
    pipeline.add_argument("--discourses", type=int, default=None)
    pipeline.add_argument("--law", default=None)
    pipeline.add_argument("--test-fraction", type=float, default=0.2)
    return parser


def _generator_options(args: argparse.Namespace) -> dict:
    return {
        "num_discourses": getattr(args, "discourses", None),
        "utterances_per_discourse": getattr(args, "utterances", None),
        "vocab_size": getattr(args, "vocab_size", None),
        "phoneme_alphabet_size": getattr(args, "phonemes", None),
        "num_speakers": getattr(args, "speakers", None),
        "num_styles": getattr(args, "styles", None),
        "target_law": getattr(args, "law", None),
        "seed": getattr(args, "seed", None),
    }


def _print(payload: dict) -> None:
    print(json.dumps(payload, indent=2, default=str, ensure_ascii=False))


def run_command(args: argparse.Namespace) -> int:
    config = load_config(args.config)

    if args.command == "pipeline":
        orchestrator = CommandOrchestrator(config)
        result = orchestrator.execute_workflow(
            args.workflow,
            work_dir=args.work_dir,
            corpus_dir=args.corpus_dir,
            generator_options={k: v for k, v in _generator_options(args).items() if v is not None},
            test_fraction=args.test_fraction,
        )
        _print(result)
        return 0 if result.get("success") else EXIT_FAILURE

    commands = {
        "prepare": PrepareCommand,
        "train": TrainCommand,
        "infer": InferCommand,
        "eval": EvalCommand,
        "plot-pitch": PlotPitchCommand,
        "generate": GenerateCommand,
        "compare": CompareCommand,
    }
    command: BaseCommand = commands[args.command](config)
    kwargs = {k: v for k, v in vars(args).items() if k not in ("command", "config", "log_level")}
    if args.command == "generate":
        kwargs = {"out_dir": args.out_dir, "options": _generator_options(args)}

    result = command.run(**kwargs)
    _print(result)
    return BaseCommand.exit_code(result)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run_command(args)
    except ProsodyError as exc:
        # config loading happens before any command wrapper
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE if isinstance(exc, UsageError) else EXIT_FAILURE
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
