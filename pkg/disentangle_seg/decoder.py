"""Cross-modal decoding of class and patch embeddings into score maps."""

from collections.abc import Sequence
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .backbone import Block
from .exceptions import DomainError

DECODER_LAYERS = 2


@dataclass
class ScoreMap:
    """Per-slot logits ``(B, n + N, H', W')``; background slots come first."""

    logits: torch.Tensor
    num_background: int
    class_ids: tuple[int, ...]

    @property
    def background(self) -> torch.Tensor:
        return self.logits[:, : self.num_background]

    @property
    def foreground(self) -> torch.Tensor:
        return self.logits[:, self.num_background :]

    def channels_for(self, class_ids: Sequence[int]) -> torch.Tensor:
        """Background slots followed by the requested foreground classes."""
        index = list(range(self.num_background))
        index += [self.num_background + self.class_ids.index(c) for c in class_ids]
        return self.logits[:, index]


@dataclass
class FullResLogits:
    """Logits ``(B, N + 1, H, W)``; channel 0 is the fused background."""

    logits: torch.Tensor
    class_ids: tuple[int, ...]

    def predict(self) -> torch.Tensor:
        """Argmax channel per pixel, mapped to class ids."""
        table = torch.tensor((0,) + self.class_ids, device=self.logits.device)
        return table[self.logits.argmax(dim=1)]


class FusionDecoder(nn.Module):
    """Self-attention over the joint sequence of class and patch embeddings."""

    def __init__(
        self,
        dim: int,
        layers: int = DECODER_LAYERS,
        heads: int = 4,
        mlp_ratio: int = 4,
        zero_init: bool = True,
    ) -> None:
        super().__init__()
        self.dim = dim
        self.blocks = nn.ModuleList([Block(dim, heads, mlp_ratio) for _ in range(layers)])
        if zero_init:
            for blk in self.blocks:
                blk.zero_init_()

    def forward(
        self, t: torch.Tensor, v: torch.Tensor
    ) -> tuple[torch.Tensor, torch.Tensor]:
        """Decode ``t`` ``(K, C)`` or ``(B, K, C)`` with patches ``(B, M, C)``.

        Returns refined class embeddings ``(B, K, C)`` and patches ``(B, M, C)``.
        """
        if t.shape[-1] != self.dim or v.shape[-1] != self.dim:
            raise DomainError(
                "t", f"embedding widths {t.shape[-1]} and {v.shape[-1]} != {self.dim}"
            )
        if t.dim() == 2:
            t = t.unsqueeze(0).expand(v.shape[0], -1, -1)
        k = t.shape[1]
        x = torch.cat([t, v], dim=1)
        for blk in self.blocks:
            x = blk(x)
        return x[:, :k], x[:, k:]


def score_maps(
    t: torch.Tensor,
    v: torch.Tensor,
    grid: tuple[int, int],
    num_background: int,
    class_ids: Sequence[int],
) -> ScoreMap:
    """Unscaled dot products between every class slot and every patch."""
    if t.shape[1] != num_background + len(class_ids):
        raise DomainError(
            "t", f"{t.shape[1]} slots for {num_background} + {len(class_ids)} classes"
        )
    logits = torch.einsum("bkc,bmc->bkm", t, v)
    b, k, _ = logits.shape
    return ScoreMap(logits.reshape(b, k, *grid), num_background, tuple(class_ids))


def fuse_background(scores: ScoreMap) -> torch.Tensor:
    """Per-pixel maximum over the background slots, ``(B, H', W')``.

    The gradient reaches the winning slot only; ties go to the lowest slot.
    """
    if scores.num_background < 1:
        raise DomainError("scores", "no background channel to fuse")
    background = scores.background
    winner = background.argmax(dim=1, keepdim=True)
    return background.gather(1, winner).squeeze(1)


def fused_logits(scores: ScoreMap) -> torch.Tensor:
    """Fused background followed by the foreground channels."""
    return torch.cat([fuse_background(scores).unsqueeze(1), scores.foreground], dim=1)


def upsample_logits(logits: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Bilinear upsampling by an integer factor per axis."""
    h, w = logits.shape[-2:]
    if size[0] % h or size[1] % w:
        raise DomainError(
            "size", f"{size[0]}x{size[1]} is not an integer multiple of {h}x{w}"
        )
    if (h, w) == tuple(size):
        return logits
    return F.interpolate(logits, size=size, mode="bilinear", align_corners=False)
