"""Differentiable numerical primitives shared by the losses and mask logic.

All functions operate on ``torch`` tensors and keep the autograd graph, so
every result can be back-propagated into the embeddings that produced it.
"""

from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn.functional as F

from .exceptions import DomainError

# Clamp applied to the reference distribution before taking its log.
KL_EPSILON = 1e-8


@dataclass(frozen=True)
class HuberConfig:
    """Transition point of the Huber penalty."""

    delta: float = 1.0

    def __post_init__(self) -> None:
        if not self.delta > 0:
            raise DomainError("delta", f"must be positive, got {self.delta}")


def _require_nonzero(name: str, x: torch.Tensor) -> torch.Tensor:
    norm = torch.linalg.vector_norm(x, dim=-1)
    if bool((norm == 0).any()):
        raise DomainError(name, "zero-norm vector has no direction")
    return norm


def cosine_sim(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Cosine similarity along the last dimension."""
    norm_a = _require_nonzero("a", a)
    norm_b = _require_nonzero("b", b)
    return (a * b).sum(dim=-1) / (norm_a * norm_b)


def cosine_matrix(t: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between the rows of ``t``."""
    norm = _require_nonzero("t", t)
    unit = t / norm.unsqueeze(-1)
    return unit @ unit.transpose(-2, -1)


def huber(
    x: torch.Tensor, y: torch.Tensor, cfg: Optional[HuberConfig] = None
) -> torch.Tensor:
    """Elementwise Huber penalty of ``x - y``."""
    cfg = cfg or HuberConfig()
    if not isinstance(x, torch.Tensor):
        x = torch.tensor(x, dtype=torch.get_default_dtype())
    y = torch.as_tensor(y, dtype=x.dtype)
    return F.huber_loss(x, y, reduction="none", delta=cfg.delta)


def distance_potential(t: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """Euclidean distance matrix between the rows of ``t``.

    With ``normalize`` every entry is divided by the mean off-diagonal
    distance. Coincident points yield exact zeros with a zero gradient.
    """
    if t.dim() != 2 or t.shape[0] < 2:
        raise DomainError("T", f"need at least two vectors, got shape {tuple(t.shape)}")
    n = t.shape[0]
    diff = t.unsqueeze(1) - t.unsqueeze(0)
    sq = (diff * diff).sum(dim=-1)
    positive = sq > 0
    safe = torch.where(positive, sq, torch.ones_like(sq))
    dist = torch.where(positive, safe.sqrt(), torch.zeros_like(sq))
    if normalize:
        mean = dist.sum() / (n * (n - 1))
        if bool(mean > 0):
            dist = dist / mean
    return dist


def angle_potential(
    ti: torch.Tensor, tj: torch.Tensor, tk: torch.Tensor
) -> torch.Tensor:
    """Cosine of the angle at vertex ``tj`` of the triangle (ti, tj, tk).

    Inputs may carry leading batch dimensions.
    """
    u = ti - tj
    w = tk - tj
    nu = torch.linalg.vector_norm(u, dim=-1)
    nw = torch.linalg.vector_norm(w, dim=-1)
    if bool((nu == 0).any()) or bool((nw == 0).any()):
        raise DomainError("tj", "degenerate vertex coincides with an endpoint")
    return (u * w).sum(dim=-1) / (nu * nw)


def class_softmax(s: torch.Tensor, temperature: float = 1.0) -> torch.Tensor:
    """Softmax over the class axis (second to last) of ``s / temperature``."""
    if not temperature > 0:
        raise DomainError("temperature", f"must be positive, got {temperature}")
    return torch.softmax(s / temperature, dim=-2)


def kl_divergence(
    p: torch.Tensor, q: torch.Tensor, eps: float = KL_EPSILON
) -> torch.Tensor:
    """Mean over columns of KL(P || Q), classes on the second to last axis."""
    if p.shape != q.shape:
        raise DomainError(
            "Q", f"shape {tuple(q.shape)} does not match P {tuple(p.shape)}"
        )
    per_column = (torch.xlogy(p, p) - p * torch.log(q.clamp(min=eps))).sum(dim=-2)
    return per_column.mean()


def masked_mean_pool(mask: torch.Tensor, v: torch.Tensor) -> Optional[torch.Tensor]:
    """Mean of the rows of ``v`` selected by ``mask``.

    Returns None when the mask selects nothing.
    """
    flat = mask.reshape(-1)
    if flat.shape[0] != v.shape[0]:
        raise DomainError(
            "mask", f"has {flat.shape[0]} entries but V has {v.shape[0]} rows"
        )
    active = flat.to(torch.bool)
    count = int(active.sum())
    if count == 0:
        return None
    weights = active.to(v.dtype)
    return (weights.unsqueeze(-1) * v).sum(dim=0) / count


def topk_similar_pairs(t: torch.Tensor, k: int) -> list[tuple[int, int]]:
    """The ``k`` directed pairs (i, j), i != j, with the largest cosine.

    Ties are broken by ascending (i, j).
    """
    n = t.shape[0]
    total = n * (n - 1)
    if k < 1 or k > total:
        raise DomainError("k", f"must lie in [1, {total}] for {n} vectors, got {k}")
    cos = cosine_matrix(t.detach()).tolist()
    pairs = [(i, j) for i in range(n) for j in range(n) if i != j]
    pairs.sort(key=lambda ij: (-cos[ij[0]][ij[1]], ij[0], ij[1]))
    return pairs[:k]
