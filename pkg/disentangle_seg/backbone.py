"""Patch-transformer image encoder with dense-prediction surgeries.

The final block can drop its feed-forward path and residual connection and
compute attention from value-value similarity. Features from several blocks
are concatenated and projected back to the model width, and an optional
convolutional adapter refines the patch grid.
"""

import logging
import warnings
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from typing import Optional

import torch
import torch.nn as nn
import torch.nn.functional as F

from .exceptions import DomainError

logger = logging.getLogger(__name__)

LAST_LAYER_MODES = ("standard", "vv_no_ffn_no_residual")
TRAINABLE_COMPONENTS = ("prompts", "adapter", "encoder")


@dataclass
class BackboneConfig:
    """Shape and surgery options of the patch encoder."""

    image_size: int = 64
    patch_size: int = 8
    depth: int = 4
    dim: int = 64
    heads: int = 4
    mlp_ratio: int = 4
    fuse_layers: tuple[int, ...] = (2, 3, 4)
    last_layer_mode: str = "vv_no_ffn_no_residual"
    adapter_enabled: bool = True
    trainable_set: frozenset[str] = field(
        default_factory=lambda: frozenset(TRAINABLE_COMPONENTS)
    )

    def __post_init__(self) -> None:
        if not isinstance(self.fuse_layers, tuple):
            if not isinstance(self.fuse_layers, (list, set, frozenset)):
                warnings.warn(
                    f"BackboneConfig fuse_layers should be a sequence, got "
                    f"{type(self.fuse_layers).__name__}. Using the last layer."
                )
                self.fuse_layers = (self.depth,)
            else:
                self.fuse_layers = tuple(sorted(self.fuse_layers))
        self.trainable_set = frozenset(self.trainable_set)

        if self.image_size % self.patch_size:
            raise DomainError(
                "image_size",
                f"{self.image_size} is not divisible by patch {self.patch_size}",
            )
        if self.dim % self.heads:
            raise DomainError("heads", f"dim {self.dim} is not divisible by {self.heads}")
        if not self.fuse_layers:
            raise DomainError("fuse_layers", "at least one layer must be fused")
        bad = [i for i in self.fuse_layers if not 1 <= i <= self.depth]
        if bad:
            raise DomainError("fuse_layers", f"{bad} outside [1, {self.depth}]")
        if self.last_layer_mode not in LAST_LAYER_MODES:
            raise DomainError(
                "last_layer_mode", f"expected one of {LAST_LAYER_MODES}"
            )
        if not self.trainable_set:
            raise DomainError("trainable_set", "at least one component must train")
        unknown = sorted(self.trainable_set - set(TRAINABLE_COMPONENTS))
        if unknown:
            raise DomainError("trainable_set", f"unknown components {unknown}")

    @property
    def grid(self) -> tuple[int, int]:
        side = self.image_size // self.patch_size
        return side, side

    @classmethod
    def full_preset(cls) -> "BackboneConfig":
        """ViT-B/16-sized encoder at 512x512 fusing layers 4, 6, 8 and 12."""
        return cls(
            image_size=512,
            patch_size=16,
            depth=12,
            dim=512,
            heads=8,
            fuse_layers=(4, 6, 8, 12),
        )


@dataclass
class PatchEmbeddings:
    """Patch features ``(B, M, C)`` on a ``grid`` of ``M = H' * W'`` patches."""

    values: torch.Tensor
    grid: tuple[int, int]
    layers: tuple[torch.Tensor, ...] = ()

    def as_grid(self) -> torch.Tensor:
        b, _, c = self.values.shape
        return self.values.transpose(1, 2).reshape(b, c, *self.grid)


class Attention(nn.Module):
    """Multi-head self-attention; ``value_value`` scores values against values.

    Value-value scores are scaled by the full width ``C`` rather than the head
    width.
    """

    def __init__(self, dim: int, num_heads: int, value_value: bool = False) -> None:
        super().__init__()
        self.num_heads = num_heads
        self.head_dim = dim // num_heads
        self.value_value = value_value
        self.scale = (dim if value_value else self.head_dim) ** -0.5
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, n, c = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        if self.value_value:
            q = k = v
        attn = (q * self.scale) @ k.transpose(-2, -1)
        attn = attn.softmax(dim=-1)
        x = (attn @ v).transpose(1, 2).reshape(b, n, c)
        return self.proj(x)


class Block(nn.Module):
    """Pre-norm transformer block.

    In ``vv_no_ffn_no_residual`` mode the block is reduced to normalisation,
    value-value attention and the output projection.
    """

    def __init__(
        self, dim: int, num_heads: int, mlp_ratio: int = 4, mode: str = "standard"
    ) -> None:
        super().__init__()
        self.mode = mode
        reduced = mode == "vv_no_ffn_no_residual"
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads, value_value=reduced)
        if reduced:
            self.norm2 = None
            self.mlp = None
        else:
            self.norm2 = nn.LayerNorm(dim)
            self.mlp = nn.Sequential(
                nn.Linear(dim, dim * mlp_ratio),
                nn.GELU(),
                nn.Linear(dim * mlp_ratio, dim),
            )

    def zero_init_(self) -> None:
        """Zero the residual branches so the block starts as the identity."""
        nn.init.zeros_(self.attn.proj.weight)
        nn.init.zeros_(self.attn.proj.bias)
        if self.mlp is not None:
            nn.init.zeros_(self.mlp[-1].weight)
            nn.init.zeros_(self.mlp[-1].bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.mlp is None:
            return self.attn(self.norm1(x))
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchAdapter(nn.Module):
    """Residual two-layer convolution over the patch grid."""

    def __init__(self, dim: int, hidden: Optional[int] = None) -> None:
        super().__init__()
        hidden = hidden or max(dim // 4, 1)
        self.conv1 = nn.Conv2d(dim, hidden, kernel_size=3, padding=1)
        self.act = nn.GELU()
        self.conv2 = nn.Conv2d(hidden, dim, kernel_size=3, padding=1)
        nn.init.zeros_(self.conv2.weight)
        nn.init.zeros_(self.conv2.bias)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.conv2(self.act(self.conv1(x)))


class PatchBackbone(nn.Module):
    """Image encoder returning fused, adapted patch embeddings."""

    def __init__(self, cfg: BackboneConfig) -> None:
        super().__init__()
        self.cfg = cfg
        h, w = cfg.grid
        self.patch_embed = nn.Conv2d(3, cfg.dim, kernel_size=cfg.patch_size, stride=cfg.patch_size)
        self.pos_embed = nn.Parameter(torch.zeros(1, h * w, cfg.dim))
        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        modes = ["standard"] * (cfg.depth - 1) + [cfg.last_layer_mode]
        self.blocks = nn.ModuleList(
            [Block(cfg.dim, cfg.heads, cfg.mlp_ratio, mode) for mode in modes]
        )
        self.fuse = nn.Conv2d(len(cfg.fuse_layers) * cfg.dim, cfg.dim, kernel_size=1)
        self.adapter = PatchAdapter(cfg.dim) if cfg.adapter_enabled else None

    def _positions(self, grid: tuple[int, int]) -> torch.Tensor:
        if grid == self.cfg.grid:
            return self.pos_embed
        h, w = self.cfg.grid
        pos = self.pos_embed.transpose(1, 2).reshape(1, self.cfg.dim, h, w)
        pos = F.interpolate(pos, size=grid, mode="bilinear", align_corners=False)
        return pos.flatten(2).transpose(1, 2)

    def encode_patches(self, images: torch.Tensor) -> PatchEmbeddings:
        """Patchify, embed, and run every block, caching each block's output."""
        if images.dim() != 4 or images.shape[1] != 3:
            raise DomainError("images", f"expected (B, 3, H, W), got {tuple(images.shape)}")
        p = self.cfg.patch_size
        height, width = images.shape[-2:]
        if height % p or width % p:
            raise DomainError(
                "images", f"{height}x{width} is not divisible by patch {p}"
            )
        grid = (height // p, width // p)
        x = self.patch_embed(images).flatten(2).transpose(1, 2)
        x = x + self._positions(grid)
        cached = []
        for blk in self.blocks:
            x = blk(x)
            cached.append(x)
        return PatchEmbeddings(x, grid, tuple(cached))

    def fuse_layers(
        self, cached: Sequence[torch.Tensor], grid: tuple[int, int]
    ) -> PatchEmbeddings:
        """Concatenate the configured layers channel-wise and project to ``C``."""
        if not self.cfg.fuse_layers:
            raise DomainError("fuse_layers", "at least one layer must be fused")
        selected = [cached[i - 1] for i in self.cfg.fuse_layers]
        if len({t.shape[1] for t in selected}) != 1:
            raise DomainError("cached", "fused layers disagree on the patch count")
        stacked = torch.cat(selected, dim=-1)
        b, m, c = stacked.shape
        out = self.fuse(stacked.transpose(1, 2).reshape(b, c, *grid))
        return PatchEmbeddings(out.flatten(2).transpose(1, 2), grid, tuple(cached))

    def apply_adapter(self, patches: PatchEmbeddings) -> PatchEmbeddings:
        """Residual refinement on the grid; identity when the adapter is off."""
        if self.adapter is None:
            return patches
        refined = self.adapter(patches.as_grid())
        return PatchEmbeddings(refined.flatten(2).transpose(1, 2), patches.grid, patches.layers)

    def forward(self, images: torch.Tensor) -> PatchEmbeddings:
        encoded = self.encode_patches(images)
        fused = self.fuse_layers(encoded.layers, encoded.grid)
        return self.apply_adapter(fused)

    def encoder_parameters(self) -> Iterable[nn.Parameter]:
        for name, param in self.named_parameters():
            if not name.startswith("adapter."):
                yield param

    def adapter_parameters(self) -> Iterable[nn.Parameter]:
        return self.adapter.parameters() if self.adapter is not None else iter(())

    def apply_trainable(self, trainable_set: Iterable[str]) -> None:
        """Switch ``requires_grad`` on the encoder and adapter."""
        chosen = set(trainable_set)
        for param in self.encoder_parameters():
            param.requires_grad_("encoder" in chosen)
        for param in self.adapter_parameters():
            param.requires_grad_("adapter" in chosen)
