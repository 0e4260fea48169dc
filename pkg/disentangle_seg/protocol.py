"""Continual-learning protocol.

A :class:`ClassPartition` splits the foreground classes into ordered steps.
:class:`ContinualTrainer` walks those steps: it snapshots the previous model,
freezes old prompts, initialises new ones, trains on the step's subset with
pseudo-labels and the disentanglement losses, and evaluates on every class
seen so far.
"""

import copy
import logging
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import torch
from torch.utils.data import DataLoader, Dataset
from tqdm import tqdm

from .data_synth import IGNORE_LABEL, SampleRecord, load_sample
from .decoder import FullResLogits
from .exceptions import DomainError, StateError
from .losses import (
    LpdConfig,
    batch_bkg_contrastive_loss,
    ce_loss,
    dense_loss,
    lpd_loss,
    plasticity_loss,
    stability_loss,
)
from .metrics import ConfusionMatrix, MetricReport, miou, parameter_table, topology_correlation
from .segmenter import Segmenter
from .seeding import derive_seed
from .text_bank import freeze_step_prompts, transfer_weights

logger = logging.getLogger(__name__)

MODES = ("disjoint", "overlapped", "joint")

SampleLoader = Callable[[SampleRecord, Path, Optional[int]], tuple[torch.Tensor, torch.Tensor]]


@dataclass(frozen=True)
class ClassPartition:
    """Ordered, disjoint class-id sets ``C^1 .. C^T``; id 0 belongs to none."""

    mode: str
    steps: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise DomainError("mode", f"expected one of {MODES}, got {self.mode!r}")
        steps = tuple(tuple(sorted(s)) for s in self.steps)
        object.__setattr__(self, "steps", steps)
        if not steps or any(not s for s in steps):
            raise DomainError("steps", "every step needs at least one class")
        if self.mode == "joint" and len(steps) != 1:
            raise DomainError("steps", "joint mode has exactly one step")
        flat = [c for s in steps for c in s]
        if len(set(flat)) != len(flat):
            raise DomainError("steps", "class sets of different steps overlap")
        if flat != list(range(1, len(flat) + 1)):
            raise DomainError("steps", "class ids must be 1..N in ascending step order")

    @classmethod
    def from_split(cls, split: str, num_classes: int, mode: str = "overlapped") -> "ClassPartition":
        """Parse ``"B-k"``: a base of ``B`` classes, then steps of ``k``.

        A shorter final step takes whatever remains.
        """
        classes = list(range(1, num_classes + 1))
        if mode == "joint":
            return cls(mode, (tuple(classes),))
        try:
            base, inc = (int(part) for part in split.split("-"))
        except ValueError:
            raise DomainError("split", f"expected 'base-increment', got {split!r}") from None
        if not 1 <= base <= num_classes or inc < 1:
            raise DomainError("split", f"{split!r} does not fit {num_classes} classes")
        steps = [tuple(classes[:base])]
        for start in range(base, num_classes, inc):
            steps.append(tuple(classes[start : start + inc]))
        return cls(mode, tuple(steps))

    @property
    def num_steps(self) -> int:
        return len(self.steps)

    @property
    def num_classes(self) -> int:
        return sum(len(s) for s in self.steps)

    def _check(self, step: int) -> None:
        if not 1 <= step <= self.num_steps:
            raise DomainError("t", f"step {step} outside [1, {self.num_steps}]")

    def new_classes(self, step: int) -> list[int]:
        self._check(step)
        return list(self.steps[step - 1])

    def classes_until(self, step: int) -> list[int]:
        if step == 0:
            return []
        self._check(step)
        return [c for s in self.steps[:step] for c in s]

    def old_classes(self, step: int) -> list[int]:
        self._check(step)
        return self.classes_until(step - 1)

    def to_dict(self) -> dict:
        return {"mode": self.mode, "steps": [list(s) for s in self.steps]}

    @classmethod
    def from_dict(cls, data: Mapping) -> "ClassPartition":
        return cls(data["mode"], tuple(tuple(s) for s in data["steps"]))


def retains(record: SampleRecord, partition: ClassPartition, step: int) -> bool:
    """Whether step ``step`` trains on this image."""
    present = set(record.classes)
    if partition.mode == "joint":
        return True
    if not present & set(partition.new_classes(step)):
        return False
    if partition.mode == "disjoint":
        return present <= set(partition.classes_until(step))
    return True


def remap_table(keep: Iterable[int]) -> torch.Tensor:
    """Lookup table sending every id outside ``keep`` to background."""
    table = torch.zeros(256, dtype=torch.long)
    for c in keep:
        table[c] = c
    table[IGNORE_LABEL] = IGNORE_LABEL
    return table


class StepDataset(Dataset):
    """Records of one step, loaded on demand with labels remapped."""

    def __init__(
        self,
        records: Sequence[SampleRecord],
        root: Union[str, Path],
        keep: Iterable[int],
        image_size: Optional[int] = None,
        loader: SampleLoader = load_sample,
    ) -> None:
        self.records = list(records)
        self.root = Path(root)
        self.keep = tuple(sorted(keep))
        self.image_size = image_size
        self.loader = loader
        self._table = remap_table(self.keep)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, index: int) -> tuple[torch.Tensor, torch.Tensor]:
        image, labels = self.loader(self.records[index], self.root, self.image_size)
        return image, self._table[labels]


def partition_dataset(
    records: Sequence[SampleRecord],
    partition: ClassPartition,
    step: int,
    root: Union[str, Path],
    image_size: Optional[int] = None,
    loader: SampleLoader = load_sample,
) -> StepDataset:
    """Training subset of step ``step``; labels outside ``C^t`` become 0."""
    new = partition.new_classes(step)
    kept = [r for r in records if retains(r, partition, step)]
    logger.debug("step %d keeps %d of %d images", step, len(kept), len(records))
    return StepDataset(kept, root, new, image_size, loader)


def evaluation_dataset(
    records: Sequence[SampleRecord],
    partition: ClassPartition,
    step: int,
    root: Union[str, Path],
    image_size: Optional[int] = None,
    loader: SampleLoader = load_sample,
) -> StepDataset:
    """Every test image, with classes not yet seen mapped to background."""
    return StepDataset(records, root, partition.classes_until(step), image_size, loader)


@dataclass(frozen=True)
class PseudoLabelConfig:
    confidence_tau: float = 0.7

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence_tau <= 1.0:
            raise DomainError("confidence_tau", f"must lie in [0, 1], got {self.confidence_tau}")


def pseudo_label(
    prev_logits: Optional[Union[FullResLogits, torch.Tensor]],
    y: torch.Tensor,
    cfg: PseudoLabelConfig,
    partition: ClassPartition,
    step: int,
) -> torch.Tensor:
    """Merge confident old-class predictions into background pixels of ``y``."""
    if step < 2:
        raise StateError(f"pseudo-labels need a previous step, got step {step}")
    if prev_logits is None:
        raise StateError("no previous-step snapshot to pseudo-label from")
    if isinstance(prev_logits, FullResLogits):
        table = torch.tensor((0,) + prev_logits.class_ids, device=y.device)
        logits = prev_logits.logits
    else:
        logits = prev_logits
        table = torch.arange(logits.shape[1], device=y.device)
    if tuple(logits.shape[-2:]) != tuple(y.shape[-2:]):
        raise DomainError("prev_logits", f"resolution {tuple(logits.shape[-2:])} != labels")
    confidence, index = logits.softmax(dim=1).max(dim=1)
    predicted = table[index]
    old = torch.tensor(partition.old_classes(step), device=y.device, dtype=predicted.dtype)
    mask = (y == 0) & torch.isin(predicted, old) & (confidence >= cfg.confidence_tau)
    logger.debug("pseudo-labelled %d pixels", int(mask.sum()))
    return torch.where(mask, predicted, y)


@dataclass(frozen=True)
class TrainingConfig:
    """Optimisation schedule and method switches of the protocol."""

    epochs: int = 20
    batch_size: int = 8
    lr: float = 1e-3
    incremental_lr_scale: float = 0.1
    encoder_lr_scale: float = 0.3
    weight_decay: float = 0.01
    lambda_lpd: float = 1.0
    lambda_bkg: float = 0.1
    eval_batch_size: int = 16
    image_size: Optional[int] = None
    trainable: frozenset[str] = frozenset({"prompts", "adapter", "encoder"})
    use_prompt: bool = True
    use_lpd: bool = True
    use_mbd: bool = True
    use_pseudo_label: bool = True
    progress: bool = False
    shuffle_seed: int = 0

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise DomainError("epochs", f"must be non-negative, got {self.epochs}")
        if self.batch_size < 1 or self.eval_batch_size < 1:
            raise DomainError("batch_size", "batch sizes must be positive")
        if not self.lr > 0:
            raise DomainError("lr", f"must be positive, got {self.lr}")

    def step_lr(self, step: int) -> float:
        return self.lr if step == 1 else self.lr * self.incremental_lr_scale


@dataclass
class StepResult:
    step: int
    confusion: ConfusionMatrix
    report: MetricReport
    losses: dict[str, float] = field(default_factory=dict)


@dataclass
class ContinualState:
    """Model, partition and completed-step counter of a continual run.

    ``previous`` holds the frozen copy of the step ``t - 1`` model while step
    ``t >= 2`` trains.
    """

    model: Segmenter
    partition: ClassPartition
    step: int = 0
    previous: Optional[Segmenter] = None
    history: list[StepResult] = field(default_factory=list)


def snapshot(model: Segmenter) -> Segmenter:
    """Deep copy with every parameter frozen and the module in eval mode."""
    frozen = copy.deepcopy(model)
    for param in frozen.parameters():
        param.requires_grad_(False)
    return frozen.eval()


def metric_groups(partition: ClassPartition, step: int) -> dict[str, list[int]]:
    seen = partition.classes_until(step)
    return {
        "base": partition.new_classes(1),
        "new": [c for c in seen if c not in partition.steps[0]],
        "all": [0] + seen,
    }


def evaluate(
    model: Segmenter,
    dataset: StepDataset,
    partition: ClassPartition,
    step: int,
    batch_size: int = 16,
) -> tuple[ConfusionMatrix, MetricReport]:
    """Confusion and group mIoU over every class seen up to ``step``."""
    seen = partition.classes_until(step)
    cm = ConfusionMatrix(partition.num_classes)
    was_training = model.training
    model.eval()
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=False)
    for images, labels in loader:
        cm.update(model.predict(images, seen), labels)
    model.train(was_training)
    report = miou(cm, metric_groups(partition, step))
    report.parameters = parameter_table(model)
    embeddings, templates = class_embeddings(model, seen)
    report.topology = topology_correlation(embeddings, templates)
    return cm, report


def class_embeddings(
    model: Segmenter, class_ids: Sequence[int]
) -> tuple[torch.Tensor, torch.Tensor]:
    """Current foreground embeddings and their templates, detached."""
    with torch.no_grad():
        embeddings = model.text_bank.embeddings(class_ids).foreground
    return embeddings.detach(), model.text_bank.template_matrix(class_ids).detach()


class ContinualTrainer:
    """Runs protocol steps in order against one :class:`ContinualState`."""

    def __init__(
        self,
        state: ContinualState,
        train_records: Sequence[SampleRecord],
        test_records: Sequence[SampleRecord],
        root: Union[str, Path],
        training: Optional[TrainingConfig] = None,
        lpd: Optional[LpdConfig] = None,
        pseudo: Optional[PseudoLabelConfig] = None,
        loader: SampleLoader = load_sample,
    ) -> None:
        self.state = state
        self.train_records = list(train_records)
        self.test_records = list(test_records)
        self.root = Path(root)
        self.training = training or TrainingConfig()
        self.lpd = lpd or LpdConfig()
        self.pseudo = pseudo or PseudoLabelConfig()
        self.loader = loader

    @property
    def model(self) -> Segmenter:
        return self.state.model

    @property
    def partition(self) -> ClassPartition:
        return self.state.partition

    def _init_prompts(self, step: int) -> None:
        bank = self.model.text_bank
        new = self.partition.new_classes(step)
        if step == 1:
            for c in new:
                bank.add_class_prompt(c)
            return
        with torch.no_grad():
            embeddings = bank.embeddings(self.partition.old_classes(step))
        for c in new:
            transfer_weights(c, bank.templates, embeddings, bank.prompts)

    def _trainable_set(self) -> set[str]:
        chosen = set(self.training.trainable)
        if not self.training.use_prompt:
            chosen.discard("prompts")
        return chosen

    def _optimizer(self, step: int) -> torch.optim.Optimizer:
        lr = self.training.step_lr(step)
        groups = self.model.component_parameters()
        head = [p for name in ("prompts", "adapter", "decoder") for p in groups[name]]
        encoder = groups["encoder"]
        param_groups = [
            {"params": [p for p in head if p.requires_grad], "lr": lr},
            {
                "params": [p for p in encoder if p.requires_grad],
                "lr": lr * self.training.encoder_lr_scale,
            },
        ]
        param_groups = [g for g in param_groups if g["params"]]
        return torch.optim.AdamW(param_groups, lr=lr, weight_decay=self.training.weight_decay)

    def _batch_loss(
        self, step: int, images: torch.Tensor, labels: torch.Tensor
    ) -> tuple[torch.Tensor, dict[str, float]]:
        seen = self.partition.classes_until(step)
        out = self.model(images, seen)
        targets = labels
        if step >= 2 and self.training.use_pseudo_label:
            assert self.state.previous is not None
            with torch.no_grad():
                prev = self.state.previous(images, self.partition.old_classes(step)).logits
            targets = pseudo_label(prev, labels, self.pseudo, self.partition, step)
        loss = ce_loss(out.logits.logits, targets)
        parts = {"ce": float(loss.detach())}
        if step < 2:
            return loss, parts
        new = self.partition.new_classes(step)
        if self.training.use_lpd:
            t = out.embeddings.foreground
            t_star = self.model.text_bank.template_matrix(seen)
            lpd = lpd_loss(
                stability_loss(t, t_star, self.lpd.huber, self.lpd.normalize_distance),
                plasticity_loss(t, seen, new, self.lpd),
                dense_loss(out.patches.values, t, t_star, self.lpd),
                self.lpd,
            )
            loss = loss + self.training.lambda_lpd * lpd
            parts["lpd"] = float(lpd.detach())
        if self.training.use_mbd:
            bkg = batch_bkg_contrastive_loss(
                out.scores, labels, out.patches.values, self.partition.old_classes(step), new
            )
            loss = loss + self.training.lambda_bkg * bkg
            parts["bkg"] = float(bkg.detach())
        return loss, parts

    def run_step(self, step: int) -> StepResult:
        """Train and evaluate step ``step``; steps must run in order."""
        if step != self.state.step + 1:
            raise StateError(f"step {step} requested after step {self.state.step}")
        self.partition.new_classes(step)
        model = self.model
        self.state.previous = snapshot(model) if step >= 2 else None
        freeze_step_prompts(step, self.partition, model.text_bank.prompts)
        self._init_prompts(step)
        model.apply_trainable(self._trainable_set())
        model.train()

        dataset = partition_dataset(
            self.train_records, self.partition, step, self.root,
            self.training.image_size, self.loader,
        )  # fmt: skip
        if len(dataset) == 0:
            raise StateError(f"step {step} has no training images")
        gen = torch.Generator().manual_seed(derive_seed(self.training.shuffle_seed, "step", step))
        loader = DataLoader(dataset, batch_size=self.training.batch_size, shuffle=True, generator=gen)
        optimizer = self._optimizer(step)

        epoch_parts: dict[str, float] = {}
        epochs = tqdm(
            range(self.training.epochs),
            desc=f"step {step}",
            disable=not self.training.progress,
        )
        for epoch in epochs:
            totals: dict[str, float] = {}
            batches = 0
            for images, labels in loader:
                loss, parts = self._batch_loss(step, images, labels)
                optimizer.zero_grad()
                loss.backward()
                optimizer.step()
                for name, value in parts.items():
                    totals[name] = totals.get(name, 0.0) + value
                batches += 1
            epoch_parts = {name: value / batches for name, value in totals.items()}
            logger.info(
                "step %d epoch %d/%d %s",
                step,
                epoch + 1,
                self.training.epochs,
                " ".join(f"{k}={v:.4f}" for k, v in epoch_parts.items()),
            )

        self.state.step = step
        result = self.evaluate(step)
        result.losses = epoch_parts
        self.state.history.append(result)
        return result

    def evaluate(self, step: Optional[int] = None) -> StepResult:
        step = step or self.state.step
        dataset = evaluation_dataset(
            self.test_records, self.partition, step, self.root,
            self.training.image_size, self.loader,
        )  # fmt: skip
        cm, report = evaluate(
            self.model, dataset, self.partition, step, self.training.eval_batch_size
        )
        logger.info("step %d mIoU all=%.4f", step, report.groups.get("all", float("nan")))
        return StepResult(step, cm, report)

    def run(self, max_steps: Optional[int] = None) -> list[StepResult]:
        last = self.partition.num_steps if max_steps is None else min(max_steps, self.partition.num_steps)
        return [self.run_step(t) for t in range(self.state.step + 1, last + 1)]
