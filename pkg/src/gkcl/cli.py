"""Command-line entry point: ``gkcl <command> [options]``."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import harness
from .errors import GKCLError


def _seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(s) for s in text.replace(";", ",").split(",") if s.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _add_experiment_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="key = value config file")
    p.add_argument("--profile", choices=sorted(harness.EXPERIMENT_PROFILES), help="preset scale (default: paper)")
    p.add_argument("--seed", type=int, help="run a single seed")
    p.add_argument("--seeds", type=_seed_list, help="comma-separated seeds")
    p.add_argument("--tasks", type=int, help="number of tasks T")
    p.add_argument("--stream", choices=harness.STREAMS, help="task stream (default: permuted)")
    p.add_argument("--coreset-train", type=int, help="coreset samples per class during training")
    p.add_argument("--coreset-infer", type=int, help="coreset samples per class at inference")
    p.add_argument("--kernel", choices=("linear", "poly", "rbf"), help="kernel type")
    p.add_argument("--no-contrastive", action="store_true", help="drop the contrastive regulariser")
    p.add_argument("--out", type=Path, required=True, help="run record directory")
    p.add_argument("--quiet", action="store_true", help="no progress lines")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gkcl", description="Generative kernel continual learning experiments.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "run": "train and evaluate the full method",
        "ablate-coreset": "generative vs uniform coresets and inference-size sweep",
        "ablate-contrastive": "with and without the contrastive regulariser",
        "ablate-kernel": "linear, polynomial and RBF kernels, plus identity f_gamma",
        "baseline": "naive sequential fine-tuning",
        "dump-embeddings": "train, then save encoder representations of coresets and test data",
    }
    for name, text in helps.items():
        _add_experiment_flags(sub.add_parser(name, help=text, description=text))
    rep = sub.add_parser("report", help="aggregate metrics.csv files", description="aggregate metrics.csv files")
    rep.add_argument("paths", nargs="+", type=Path, help="run record directories or metrics.csv files")
    rep.add_argument("--out", type=Path, help="write summary.csv and summary.txt here")
    return parser


def resolve(args: argparse.Namespace) -> harness.ExperimentConfig:
    """Profile, then config file, then command-line flags."""
    settings: dict[str, object] = {}
    if args.config is not None:
        settings.update(harness.load_config(args.config))
    if args.profile is not None:
        settings["profile"] = args.profile
    if args.seeds is not None:
        settings["seeds"] = args.seeds
    if args.seed is not None:
        settings["seeds"] = (args.seed,)
    flags = {"tasks": args.tasks, "stream": args.stream, "coreset_train": args.coreset_train,
             "coreset_infer": args.coreset_infer, "kernel": args.kernel}
    settings.update({k: v for k, v in flags.items() if v is not None})
    if args.no_contrastive:
        settings["con_weight"] = 0.0
    return harness.build_config(settings)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            summary = harness.cmd_report(args.paths, args.out)
        else:
            exp = resolve(args)
            progress = None if args.quiet else (lambda msg: print(msg, file=sys.stderr, flush=True))
            summary = harness.COMMANDS[args.command](exp, args.out, progress)
    except GKCLError as err:
        print(f"gkcl: error: {err}", file=sys.stderr)
        return 2
    sys.stdout.write(harness.format_summary(summary))
    return 0


if __name__ == "__main__":
    sys.exit(main())
