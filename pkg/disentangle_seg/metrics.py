"""Segmentation metrics, parameter accounting and CSV report emission."""

import csv
import logging
import math
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Union

import numpy as np
import torch
import torch.nn as nn
from scipy.spatial.distance import pdist
from scipy.stats import spearmanr

from .exceptions import DomainError, MetricsError

logger = logging.getLogger(__name__)

IGNORE_LABEL = 255

ArrayLike = Union[np.ndarray, torch.Tensor]


def _as_array(x: ArrayLike) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


class ConfusionMatrix:
    """Pixel counts, rows = ground truth, columns = prediction, ids ``0..N``."""

    def __init__(self, num_classes: int, counts: Optional[np.ndarray] = None) -> None:
        size = num_classes + 1
        if counts is None:
            counts = np.zeros((size, size), dtype=np.int64)
        elif counts.shape != (size, size):
            raise DomainError("counts", f"shape {counts.shape} != {(size, size)}")
        self.num_classes = num_classes
        self.counts = counts.astype(np.int64)

    @property
    def size(self) -> int:
        return self.num_classes + 1

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def update(
        self, preds: ArrayLike, gts: ArrayLike, ignore_index: int = IGNORE_LABEL
    ) -> "ConfusionMatrix":
        """Add one batch of label maps; ignored ground-truth pixels are skipped."""
        p = _as_array(preds).astype(np.int64)
        g = _as_array(gts).astype(np.int64)
        if p.shape != g.shape:
            raise DomainError("preds", f"shape {p.shape} != ground truth {g.shape}")
        valid = g != ignore_index
        p, g = p[valid], g[valid]
        for name, values in (("gts", g), ("preds", p)):
            if values.size and (values.min() < 0 or values.max() > self.num_classes):
                raise DomainError(name, f"values must lie in [0, {self.num_classes}]")
        index = self.size * g + p
        self.counts += np.bincount(index, minlength=self.size**2).reshape(self.size, self.size)
        return self

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        if other.num_classes != self.num_classes:
            raise DomainError("other", "confusion matrices differ in size")
        return ConfusionMatrix(self.num_classes, self.counts + other.counts)

    def iou(self) -> np.ndarray:
        """Per-class IoU; NaN where the class never occurs in gt nor prediction."""
        tp = np.diag(self.counts).astype(np.float64)
        union = self.counts.sum(axis=0) + self.counts.sum(axis=1) - tp
        out = np.full(self.size, np.nan)
        np.divide(tp, union, out=out, where=union > 0)
        return out


def confusion(
    preds: Union[ArrayLike, Iterable[ArrayLike]],
    gts: Union[ArrayLike, Iterable[ArrayLike]],
    num_classes: int,
    ignore_index: int = IGNORE_LABEL,
) -> ConfusionMatrix:
    """Confusion of one label map pair or of paired sequences of them."""
    cm = ConfusionMatrix(num_classes)
    if isinstance(preds, (np.ndarray, torch.Tensor)):
        return cm.update(preds, gts, ignore_index)  # type: ignore[arg-type]
    for p, g in zip(preds, gts):  # type: ignore[call-overload]
        cm.update(p, g, ignore_index)
    return cm


def harmonic(a: float, b: float) -> float:
    if a < 0 or b < 0:
        raise DomainError("a" if a < 0 else "b", "must be non-negative")
    if a + b == 0:
        return 0.0
    return 2 * a * b / (a + b)


@dataclass
class MetricReport:
    iou: dict[int, float]
    groups: dict[str, float]
    harmonic: float = math.nan
    parameters: dict[str, tuple[int, int]] = field(default_factory=dict)
    topology: float = math.nan

    def rows(self) -> list[tuple[str, float]]:
        out = [(f"iou_{c}", v) for c, v in sorted(self.iou.items())]
        out += [(f"miou_{name}", v) for name, v in self.groups.items()]
        out.append(("harmonic", self.harmonic))
        out.append(("topology_spearman", self.topology))
        return out


def _group_mean(iou: np.ndarray, ids: Sequence[int]) -> float:
    values = [iou[c] for c in ids if not np.isnan(iou[c])]
    return float(np.mean(values)) if values else math.nan


def miou(cm: ConfusionMatrix, groups: Mapping[str, Sequence[int]]) -> MetricReport:
    """Per-class IoU and group means; zero-union classes are left out of means.

    ``harmonic`` is filled when both a ``base`` and a ``new`` group are finite.
    """
    if not groups:
        raise DomainError("groups", "at least one group is required")
    iou = cm.iou()
    if np.isnan(iou).all():
        raise MetricsError("every class has zero union")
    for ids in groups.values():
        bad = [c for c in ids if not 0 <= c < cm.size]
        if bad:
            raise DomainError("groups", f"class ids {bad} outside the matrix")
    means = {name: _group_mean(iou, ids) for name, ids in groups.items()}
    report = MetricReport({c: float(v) for c, v in enumerate(iou)}, means)
    base, new = means.get("base", math.nan), means.get("new", math.nan)
    if not (math.isnan(base) or math.isnan(new)):
        report.harmonic = harmonic(base, new)
    return report


def count_parameters(params: Iterable[nn.Parameter]) -> tuple[int, int]:
    """``(trainable, total)`` element counts; shared tensors count once."""
    seen: set[int] = set()
    trainable = total = 0
    for p in params:
        if id(p) in seen:
            continue
        seen.add(id(p))
        total += p.numel()
        if p.requires_grad:
            trainable += p.numel()
    return trainable, total


def parameter_table(model: nn.Module) -> dict[str, tuple[int, int]]:
    """Per-component counts for a segmenter, plus the frozen text encoder."""
    components = model.component_parameters()  # type: ignore[operator]
    table = {name: count_parameters(params) for name, params in components.items()}
    encoder = model.text_bank.encoder  # type: ignore[union-attr]
    buffers = sum(b.numel() for b in encoder.buffers())
    params = count_parameters(encoder.parameters())
    table["text_encoder"] = (params[0], params[1] + buffers)
    table["total"] = (
        sum(t for t, _ in table.values()),
        sum(n for _, n in table.values()),
    )
    return table


def pca_projection(matrix: ArrayLike, components: int = 2) -> np.ndarray:
    """Rows projected onto the leading principal axes.

    Each axis is signed so its largest-magnitude loading is positive; missing
    axes of low-rank input are zero.
    """
    x = _as_array(matrix).astype(np.float64)
    if x.ndim != 2 or x.shape[0] < 1:
        raise DomainError("matrix", f"expected a non-empty 2-D array, got {x.shape}")
    centred = x - x.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centred, full_matrices=False)
    axes = vt[:components]
    for i, axis in enumerate(axes):
        if axis[np.argmax(np.abs(axis))] < 0:
            axes[i] = -axis
    out = np.zeros((x.shape[0], components))
    out[:, : axes.shape[0]] = centred @ axes.T
    return out


def topology_correlation(embeddings: ArrayLike, templates: ArrayLike) -> float:
    """Spearman rank correlation of the two pairwise-distance structures."""
    a = _as_array(embeddings).astype(np.float64)
    b = _as_array(templates).astype(np.float64)
    if a.shape != b.shape:
        raise DomainError("templates", f"shape {b.shape} != embeddings {a.shape}")
    if a.shape[0] < 3:
        return math.nan
    rho, _ = spearmanr(pdist(a), pdist(b))
    return float(rho)


def _fmt(value: float) -> str:
    return "nan" if math.isnan(value) else f"{value:.6f}"


def write_metrics_csv(path: Union[str, Path], report: MetricReport) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["metric", "value"])
        for name, value in report.rows():
            writer.writerow([name, _fmt(value)])
    return path


def write_confusion_csv(path: Union[str, Path], cm: ConfusionMatrix) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["gt\\pred"] + [str(c) for c in range(cm.size)])
        for c, row in enumerate(cm.counts):
            writer.writerow([str(c)] + [str(int(v)) for v in row])
    return path


def write_projection_csv(
    path: Union[str, Path],
    class_ids: Sequence[int],
    embeddings: ArrayLike,
    templates: ArrayLike,
) -> Path:
    """Embeddings and templates projected jointly, so both share one frame."""
    emb = _as_array(embeddings)
    tmpl = _as_array(templates)
    coords = pca_projection(np.concatenate([emb, tmpl], axis=0))
    n = len(class_ids)
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["class_id", "kind", "x", "y"])
        for offset, kind in ((0, "embedding"), (n, "template")):
            for i, c in enumerate(class_ids):
                x, y = coords[offset + i]
                writer.writerow([c, kind, _fmt(x), _fmt(y)])
    return path


def write_parameters_csv(
    path: Union[str, Path], parameters: Mapping[str, tuple[int, int]]
) -> Path:
    path = Path(path)
    with path.open("w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["component", "trainable", "total"])
        for name, (trainable, total) in parameters.items():
            writer.writerow([name, trainable, total])
    return path


def emit_reports(
    out_dir: Union[str, Path],
    cm: ConfusionMatrix,
    report: MetricReport,
    class_ids: Sequence[int],
    embeddings: ArrayLike,
    templates: ArrayLike,
) -> list[Path]:
    """Write ``confusion.csv``, ``projection.csv``, ``metrics.csv`` and ``parameters.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [
        write_confusion_csv(out / "confusion.csv", cm),
        write_projection_csv(out / "projection.csv", class_ids, embeddings, templates),
        write_metrics_csv(out / "metrics.csv", report),
        write_parameters_csv(out / "parameters.csv", report.parameters),
    ]
    logger.debug("wrote reports to %s", out)
    return files
