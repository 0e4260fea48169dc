"""Run directories: a full continual run, checkpoint evaluation and ablation grids."""

import csv
import logging
import math
from pathlib import Path
from typing import Any, Optional, Union

from .checkpoint import restore, save_checkpoint
from .config import (
    ExperimentConfig,
    build_model,
    class_partition,
    lpd_config,
    pseudo_label_config,
    training_config,
)
from .data_synth import Corpus
from .exceptions import DomainError
from .metrics import emit_reports, write_metrics_csv
from .protocol import ContinualState, ContinualTrainer, StepResult, class_embeddings

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved"

COMPONENT_GRID: list[tuple[str, dict[str, Any]]] = [
    (
        "baseline",
        {"method_prompt": False, "method_lpd": False, "method_manifold": False, "method_mbd": False},
    ),
    ("prompt", {"method_prompt": True, "method_lpd": False, "method_manifold": False, "method_mbd": False}),
    ("lpd", {"method_prompt": True, "method_lpd": True, "method_manifold": False, "method_mbd": False}),
    ("manifold", {"method_prompt": True, "method_lpd": True, "method_manifold": True, "method_mbd": False}),
    ("mbd", {"method_prompt": True, "method_lpd": True, "method_manifold": True, "method_mbd": True}),
]

PEFT_GRID: list[tuple[str, dict[str, Any]]] = [
    ("prompts", {"backbone_trainable": ("prompts",)}),
    ("adapter", {"backbone_trainable": ("adapter",)}),
    ("prompts_adapter", {"backbone_trainable": ("prompts", "adapter")}),
    ("prompts_adapter_encoder", {"backbone_trainable": ("prompts", "adapter", "encoder")}),
]

GRIDS = {"components": COMPONENT_GRID, "peft": PEFT_GRID}


def trainer_for(
    state: ContinualState, cfg: ExperimentConfig, corpus: Corpus
) -> ContinualTrainer:
    return ContinualTrainer(
        state,
        corpus.split("train"),
        corpus.split("test"),
        corpus.root,
        training=training_config(cfg),
        lpd=lpd_config(cfg),
        pseudo=pseudo_label_config(cfg),
    )


def write_step_outputs(
    out_dir: Path, state: ContinualState, result: StepResult
) -> None:
    """``metrics_step{t}.csv`` at the run root plus ``reports/step{t}/``."""
    seen = state.partition.classes_until(result.step)
    embeddings, templates = class_embeddings(state.model, seen)
    write_metrics_csv(out_dir / f"metrics_step{result.step}.csv", result.report)
    emit_reports(
        out_dir / "reports" / f"step{result.step}",
        result.confusion,
        result.report,
        seen,
        embeddings.cpu().numpy(),
        templates.cpu().numpy(),
    )


def run_experiment(
    cfg: ExperimentConfig,
    corpus: Corpus,
    out_dir: Union[str, Path],
    max_steps: Optional[int] = None,
) -> list[StepResult]:
    """Train every step, writing a checkpoint and reports after each one."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(cfg.resolved(), encoding="utf-8")
    partition = class_partition(cfg, len(corpus.class_names))
    state = ContinualState(build_model(cfg, corpus.class_names), partition)
    trainer = trainer_for(state, cfg, corpus)
    last = partition.num_steps if max_steps is None else min(max_steps, partition.num_steps)
    results = []
    for step in range(1, last + 1):
        result = trainer.run_step(step)
        save_checkpoint(state, out / "checkpoints" / f"step{step}.ckpt", cfg)
        write_step_outputs(out, state, result)
        results.append(result)
    return results


def evaluate_checkpoint(
    checkpoint: Union[str, Path], corpus: Corpus, out_dir: Union[str, Path]
) -> StepResult:
    """Re-evaluate a saved step on the cumulative test set."""
    state, cfg = restore(checkpoint)
    trainer = trainer_for(state, cfg, corpus)
    result = trainer.evaluate(state.step)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_step_outputs(out, state, result)
    return result


def run_ablation(
    grid: str,
    cfg: ExperimentConfig,
    corpus: Corpus,
    out_dir: Union[str, Path],
    max_steps: Optional[int] = None,
) -> list[tuple[str, StepResult]]:
    """One full run per grid row; ``ablation.csv`` compares their last steps."""
    if grid not in GRIDS:
        raise DomainError("grid", f"expected one of {sorted(GRIDS)}, got {grid!r}")
    out = Path(out_dir)
    rows = []
    for name, values in GRIDS[grid]:
        logger.info("ablation row %s", name)
        results = run_experiment(cfg.with_values(**values), corpus, out / name, max_steps)
        rows.append((name, results[-1]))
    out.mkdir(parents=True, exist_ok=True)
    with (out / "ablation.csv").open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["row", "miou_base", "miou_new", "miou_all", "harmonic", "topology_spearman"])
        for name, result in rows:
            groups = result.report.groups
            values = [
                groups.get("base", math.nan),
                groups.get("new", math.nan),
                groups.get("all", math.nan),
                result.report.harmonic,
                result.report.topology,
            ]
            writer.writerow([name] + ["nan" if math.isnan(v) else f"{v:.6f}" for v in values])
    return rows
