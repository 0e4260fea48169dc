"""Training objectives.

Segmentation cross-entropy on merged labels, the three language-guided
prototype losses (stability, plasticity, dense) and their combination, and
the background/new-class contrastive loss built on pooled region features.
"""

import itertools
import logging
from collections.abc import Collection, Sequence
from dataclasses import dataclass
from typing import NamedTuple, Optional

import torch
import torch.nn.functional as F

from .core_ops import (
    HuberConfig,
    angle_potential,
    class_softmax,
    cosine_sim,
    distance_potential,
    huber,
    kl_divergence,
    masked_mean_pool,
    topk_similar_pairs,
)
from .decoder import ScoreMap
from .exceptions import DomainError

logger = logging.getLogger(__name__)

IGNORE_INDEX = 255
PLASTICITY_FORMS = ("as_printed", "orthogonal")


@dataclass(frozen=True)
class LpdConfig:
    """Weights and knobs of the prototype disentanglement losses.

    ``k = 0`` sets the edge budget to the number of classes of the step.
    """

    alpha: float = 1.0
    beta: float = 0.2
    temperature: float = 2.0
    k: int = 0
    plasticity_form: str = "as_printed"
    huber_delta: float = 1.0
    normalize_distance: bool = True

    def __post_init__(self) -> None:
        if not self.temperature > 0:
            raise DomainError("temperature", f"must be positive, got {self.temperature}")
        if self.k < 0:
            raise DomainError("k", f"must be non-negative, got {self.k}")
        if self.plasticity_form not in PLASTICITY_FORMS:
            raise DomainError("plasticity_form", f"expected one of {PLASTICITY_FORMS}")
        HuberConfig(self.huber_delta)

    @property
    def huber(self) -> HuberConfig:
        return HuberConfig(self.huber_delta)


def ce_loss(
    logits: torch.Tensor, labels: torch.Tensor, ignore_index: int = IGNORE_INDEX
) -> torch.Tensor:
    """Mean per-pixel cross-entropy over non-ignored pixels."""
    valid = labels != ignore_index
    if valid.any():
        kept = labels[valid]
        if bool((kept < 0).any()) or bool((kept >= logits.shape[1]).any()):
            raise DomainError(
                "labels", f"values must lie in [0, {logits.shape[1] - 1}] or be ignored"
            )
    else:
        return logits.sum() * 0
    return F.cross_entropy(logits, labels.long(), ignore_index=ignore_index)


def _angle_triples(n: int) -> tuple[list[int], list[int], list[int]]:
    """Unordered triples with each member taking the vertex once."""
    first, vertex, last = [], [], []
    for i, j, k in itertools.combinations(range(n), 3):
        for a, b, c in ((i, j, k), (j, i, k), (i, k, j)):
            first.append(a)
            vertex.append(b)
            last.append(c)
    return first, vertex, last


def stability_loss(
    t: torch.Tensor,
    t_star: torch.Tensor,
    cfg: Optional[HuberConfig] = None,
    normalize: bool = True,
) -> torch.Tensor:
    """Huber match of the distance and angle structure of ``t`` to ``t*``.

    Each sum is averaged by its term count. With two classes only the
    distance term exists.
    """
    if t.shape != t_star.shape:
        raise DomainError(
            "t", f"shape {tuple(t.shape)} does not match templates {tuple(t_star.shape)}"
        )
    n = t.shape[0]
    t_star = t_star.to(t.dtype)
    rows, cols = torch.triu_indices(n, n, offset=1)
    dist = distance_potential(t, normalize)
    dist_star = distance_potential(t_star, normalize)
    loss = huber(dist[rows, cols], dist_star[rows, cols], cfg).mean()
    if n < 3:
        return loss
    i, j, k = _angle_triples(n)
    angle = angle_potential(t[i], t[j], t[k])
    angle_star = angle_potential(t_star[i], t_star[j], t_star[k])
    return loss + huber(angle, angle_star, cfg).mean()


def plasticity_loss(
    t: torch.Tensor,
    class_ids: Sequence[int],
    current_classes: Collection[int],
    cfg: Optional[LpdConfig] = None,
) -> torch.Tensor:
    """Penalty on the top-k most similar edges that start at a current class."""
    cfg = cfg or LpdConfig()
    if t.shape[0] < 2:
        raise DomainError("t", "need at least two embeddings")
    if len(class_ids) != t.shape[0]:
        raise DomainError("class_ids", f"{len(class_ids)} ids for {t.shape[0]} rows")
    current = set(current_classes)
    if not current:
        return t.sum() * 0
    n = t.shape[0]
    k = min(cfg.k or len(current), n * (n - 1))
    edges = [
        (i, j) for i, j in topk_similar_pairs(t, k) if class_ids[i] in current
    ]
    if not edges:
        return t.sum() * 0
    start = [i for i, _ in edges]
    end = [j for _, j in edges]
    cos = cosine_sim(t[start], t[end])
    if cfg.plasticity_form == "orthogonal":
        return (cos * cos).sum()
    return (1 - cos).sum()


def dense_loss(
    v: torch.Tensor,
    t: torch.Tensor,
    t_star: torch.Tensor,
    cfg: Optional[LpdConfig] = None,
) -> torch.Tensor:
    """Temperature-scaled KL between class-vs-patch and template-vs-patch maps.

    ``v`` holds pre-decoder patch embeddings ``(M, C)`` or ``(B, M, C)``.
    """
    cfg = cfg or LpdConfig()
    if t.shape != t_star.shape:
        raise DomainError(
            "t", f"shape {tuple(t.shape)} does not match templates {tuple(t_star.shape)}"
        )
    if v.shape[-1] != t.shape[-1]:
        raise DomainError("V", f"width {v.shape[-1]} does not match {t.shape[-1]}")
    scores = torch.einsum("nc,...mc->...nm", t, v)
    scores_star = torch.einsum("nc,...mc->...nm", t_star.to(t.dtype), v)
    temp = cfg.temperature
    p = class_softmax(scores, temp)
    q = class_softmax(scores_star, temp)
    return kl_divergence(p, q) * temp**2


def lpd_loss(
    stability: torch.Tensor,
    plasticity: torch.Tensor,
    dense: torch.Tensor,
    cfg: Optional[LpdConfig] = None,
) -> torch.Tensor:
    cfg = cfg or LpdConfig()
    return stability + cfg.alpha * plasticity + cfg.beta * dense


@dataclass
class MaskSets:
    """Boolean region masks on the patch grid, one stack per role."""

    background: torch.Tensor
    old: torch.Tensor
    new: torch.Tensor
    background_ref: torch.Tensor


def downsample_labels(labels: torch.Tensor, grid: tuple[int, int]) -> torch.Tensor:
    """Nearest-neighbour resize of ``(B, H, W)`` labels to the patch grid."""
    resized = F.interpolate(labels.unsqueeze(1).float(), size=grid, mode="nearest")
    return resized.squeeze(1).long()


def build_mask_sets(
    scores: torch.Tensor,
    gt: torch.Tensor,
    num_background: int,
    old_classes: Sequence[int],
    new_classes: Sequence[int],
    ignore_index: int = IGNORE_INDEX,
) -> MaskSets:
    """Region masks for one image.

    ``scores`` covers the background slots then the old classes,
    ``(n + N_old, H', W')``; ``gt`` is the step label map on the same grid.
    """
    if scores.shape[0] != num_background + len(old_classes):
        raise DomainError(
            "partition",
            f"{scores.shape[0]} channels for {num_background} background slots "
            f"and {len(old_classes)} old classes",
        )
    if tuple(gt.shape) != tuple(scores.shape[1:]):
        raise DomainError("gt", f"shape {tuple(gt.shape)} != {tuple(scores.shape[1:])}")
    allowed = {0, ignore_index, *old_classes, *new_classes}
    stray = sorted(set(gt.unique().tolist()) - allowed)
    if stray:
        raise DomainError("gt", f"class ids {stray} are not in the partition")

    winner = scores.argmax(dim=0)
    empty = torch.zeros((0, *gt.shape), dtype=torch.bool, device=gt.device)

    def stack(masks: list[torch.Tensor]) -> torch.Tensor:
        return torch.stack(masks) if masks else empty

    background = stack([winner == i for i in range(num_background)])
    old = stack([winner == num_background + j for j in range(len(old_classes))])
    new = stack([gt == c for c in new_classes])
    old_union = old.any(dim=0) if len(old_classes) else torch.zeros_like(gt, dtype=torch.bool)
    background_ref = ~(old_union.unsqueeze(0) | new)
    return MaskSets(background, old, new, background_ref)


class ContrastTerms(NamedTuple):
    value: torch.Tensor
    negatives: int
    positives: int

    @property
    def skipped(self) -> bool:
        return self.negatives == 0 and self.positives == 0


def bkg_contrastive_loss(masks: MaskSets, v: torch.Tensor) -> ContrastTerms:
    """Push background anchors away from new classes, towards the reference.

    Terms whose pooled region is empty are dropped and the two averages
    shrink accordingly.
    """
    if masks.new.shape[0] < 1:
        raise DomainError("masks", "need at least one new class")
    anchors = [masked_mean_pool(m, v) for m in masks.background]
    negatives = [masked_mean_pool(m, v) for m in masks.new]
    positives = [masked_mean_pool(m, v) for m in masks.background_ref]

    neg_terms = []
    pos_terms = []
    for anchor in anchors:
        if anchor is None:
            continue
        for neg, pos in zip(negatives, positives):
            if neg is not None:
                neg_terms.append(cosine_sim(anchor, neg))
            if pos is not None:
                pos_terms.append(1 - cosine_sim(anchor, pos))

    value = v.sum() * 0
    if neg_terms:
        value = value + torch.stack(neg_terms).mean()
    if pos_terms:
        value = value + torch.stack(pos_terms).mean()
    return ContrastTerms(value, len(neg_terms), len(pos_terms))


def batch_bkg_contrastive_loss(
    scores: ScoreMap,
    step_labels: torch.Tensor,
    patches: torch.Tensor,
    old_classes: Sequence[int],
    new_classes: Sequence[int],
) -> torch.Tensor:
    """Average the contrastive loss over the images that produced any term.

    Masks come from the detached score map; gradients reach ``patches``.
    """
    grid = tuple(scores.logits.shape[-2:])
    gt = downsample_labels(step_labels, grid)  # type: ignore[arg-type]
    channels = scores.channels_for(old_classes).detach()
    values = []
    for b in range(patches.shape[0]):
        masks = build_mask_sets(
            channels[b], gt[b], scores.num_background, old_classes, new_classes
        )
        terms = bkg_contrastive_loss(masks, patches[b])
        if terms.skipped:
            logger.debug("image %d: every contrastive term skipped", b)
            continue
        values.append(terms.value)
    if not values:
        return patches.sum() * 0
    return torch.stack(values).mean()
