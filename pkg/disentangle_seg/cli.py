"""Command-line entry point: ``gen``, ``train``, ``eval`` and ``ablate``."""

import argparse
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Optional

from .config import ExperimentConfig, shapes_config
from .data_synth import Corpus, generate_corpus
from .dispatch import CommandDispatcher
from .exceptions import DisentangleSegError
from .experiment import GRIDS, evaluate_checkpoint, run_ablation, run_experiment
from .protocol import StepResult

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s - %(levelname)s - %(name)s - %(message)s"

dispatcher = CommandDispatcher(["grid"])


def load_config(args: argparse.Namespace) -> ExperimentConfig:
    """File, then ``--set`` overrides, then ``--seed``."""
    cfg = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    return cfg.with_overrides(overrides) if overrides else cfg


def _require_dir(path: Optional[str], flag: str) -> Path:
    if not path:
        raise DisentangleSegError(f"{flag} is required")
    resolved = Path(path)
    if not resolved.is_dir():
        raise DisentangleSegError(f"{flag}: no such directory: {resolved}")
    return resolved


@dispatcher.handler("gen")
def cmd_gen(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    corpus = generate_corpus(
        shapes_config(cfg),
        cfg["data.n_train"],
        cfg["data.n_test"],
        cfg.sub_seed("data"),
        args.out,
    )
    logger.info("corpus with %d classes at %s", len(corpus.class_names), corpus.root)
    return 0


@dispatcher.handler("train")
def cmd_train(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    corpus = Corpus.load(_require_dir(args.data, "--data"))
    results = run_experiment(cfg, corpus, args.out, args.steps)
    for result in results:
        logger.info("step %d: %s", result.step, result.report.groups)
    return 0


@dispatcher.handler("eval")
def cmd_eval(args: argparse.Namespace) -> int:
    checkpoint = Path(args.checkpoint)
    if not checkpoint.is_file():
        raise DisentangleSegError(f"--checkpoint: no such file: {checkpoint}")
    corpus = Corpus.load(_require_dir(args.data, "--data"))
    result = evaluate_checkpoint(checkpoint, corpus, args.out)
    logger.info("step %d: %s", result.step, result.report.groups)
    return 0


@dispatcher.handler("ablate", grid="components")
def cmd_ablate(args: argparse.Namespace) -> int:
    for name, result in _run_grid(args, "components"):
        logger.info(
            "%s: %s topology=%.4f", name, result.report.groups, result.report.topology
        )
    return 0


@dispatcher.handler("ablate", grid="peft")
def cmd_ablate_peft(args: argparse.Namespace) -> int:
    for name, result in _run_grid(args, "peft"):
        trainable = sum(t for t, _ in result.report.parameters.values())
        logger.info("%s: %s trainable=%d", name, result.report.groups, trainable)
    return 0


def _run_grid(args: argparse.Namespace, grid: str) -> list[tuple[str, StepResult]]:
    cfg = load_config(args)
    corpus = Corpus.load(_require_dir(args.data, "--data"))
    return run_ablation(grid, cfg, corpus, args.out, args.steps)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config file (key = value lines)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a key")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="disentangle-seg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    for name, text in (("train", "run the continual protocol"), ("ablate", "run an ablation grid")):
        p = sub.add_parser(name, parents=[common], help=text)
        p.add_argument("--data", required=True, help="corpus directory")
        p.add_argument("--steps", type=int, help="stop after this many steps")
        if name == "ablate":
            p.add_argument("--grid", choices=sorted(GRIDS), default="components")
    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="corpus directory")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO, format=LOG_FORMAT
    )
    try:
        return int(dispatcher.dispatch(args))
    except (DisentangleSegError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
