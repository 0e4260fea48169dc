"""The full segmenter: text bank, patch backbone and fusion decoder."""

from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass
from typing import Optional

import torch
import torch.nn as nn

from .backbone import BackboneConfig, PatchBackbone, PatchEmbeddings
from .decoder import FullResLogits, FusionDecoder, ScoreMap, fused_logits, score_maps, upsample_logits
from .exceptions import DomainError
from .text_bank import ClassEmbeddingSet, TextBank


@dataclass
class SegmenterOutput:
    scores: ScoreMap
    logits: FullResLogits
    patches: PatchEmbeddings
    embeddings: ClassEmbeddingSet


class Segmenter(nn.Module):
    """Prompt-conditioned class embeddings matched against patch embeddings."""

    def __init__(
        self, text_bank: TextBank, backbone: PatchBackbone, decoder: FusionDecoder
    ) -> None:
        super().__init__()
        if text_bank.dim != backbone.cfg.dim:
            raise DomainError(
                "text_bank", f"width {text_bank.dim} != image width {backbone.cfg.dim}"
            )
        self.text_bank = text_bank
        self.backbone = backbone
        self.decoder = decoder

    @classmethod
    def build(
        cls,
        class_names: Mapping[int, str],
        backbone_cfg: BackboneConfig,
        seed: int = 0,
        decoder_layers: int = 2,
        decoder_heads: int = 4,
        decoder_zero_init: bool = True,
        context_length: int = 8,
        num_background: int = 4,
        context_std: float = 0.02,
        descriptions: Optional[Sequence[str]] = None,
    ) -> "Segmenter":
        """Construct every component; the caller seeds torch beforehand."""
        text_bank = TextBank(
            class_names,
            backbone_cfg.dim,
            seed=seed,
            context_length=context_length,
            num_background=num_background,
            context_std=context_std,
            descriptions=descriptions,
        )
        backbone = PatchBackbone(backbone_cfg)
        decoder = FusionDecoder(
            backbone_cfg.dim,
            layers=decoder_layers,
            heads=decoder_heads,
            mlp_ratio=backbone_cfg.mlp_ratio,
            zero_init=decoder_zero_init,
        )
        return cls(text_bank, backbone, decoder)

    def forward(self, images: torch.Tensor, class_ids: Sequence[int]) -> SegmenterOutput:
        embeddings = self.text_bank.embeddings(class_ids)
        patches = self.backbone(images)
        t_refined, v_refined = self.decoder(embeddings.stacked(), patches.values)
        scores = score_maps(
            t_refined, v_refined, patches.grid, embeddings.background.shape[0], class_ids
        )
        logits = upsample_logits(fused_logits(scores), tuple(images.shape[-2:]))
        return SegmenterOutput(
            scores, FullResLogits(logits, tuple(class_ids)), patches, embeddings
        )

    @torch.no_grad()
    def predict(self, images: torch.Tensor, class_ids: Sequence[int]) -> torch.Tensor:
        return self.forward(images, class_ids).logits.predict()

    def apply_trainable(self, trainable_set: Iterable[str]) -> None:
        """Enable gradients for the chosen components.

        Frozen prompts stay frozen whatever the selection; the decoder always
        trains.
        """
        chosen = set(trainable_set)
        self.backbone.apply_trainable(chosen)
        store = self.text_bank.prompts
        for key, param in store.contexts.items():
            param.requires_grad_("prompts" in chosen and key not in store.frozen)
        for param in self.decoder.parameters():
            param.requires_grad_(True)

    def component_parameters(self) -> dict[str, list[nn.Parameter]]:
        """Parameters grouped by component, for accounting and optimisers."""
        return {
            "prompts": list(self.text_bank.prompts.parameters()),
            "encoder": list(self.backbone.encoder_parameters()),
            "adapter": list(self.backbone.adapter_parameters()),
            "decoder": list(self.decoder.parameters()),
        }
