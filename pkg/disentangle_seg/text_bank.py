"""Text side of the segmenter: token table, frozen encoder, prompts, templates.

Class embeddings are produced by a frozen text encoder from a learnable
context concatenated with the tokens of the class name. Background slots
have no name and are encoded from their context alone. Templates are the
average encoding of a fixed list of descriptions and never change.
"""

import logging
import math
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Protocol, Union

import torch
import torch.nn as nn

from .core_ops import cosine_sim
from .exceptions import DomainError, PromptLookupError
from .mixins import TokenCacheMixin
from .mixins.cache import DEFAULT_CACHE_MAXSIZE
from .seeding import derive_seed, generator

logger = logging.getLogger(__name__)

DEFAULT_CONTEXT_LENGTH = 8
DEFAULT_NUM_BACKGROUND = 4
DEFAULT_DESCRIPTIONS = Path(__file__).parent / "data" / "descriptions.txt"
BACKGROUND_NAME = "background"

Owner = Union[int, str]


def tokenize(text: str) -> list[str]:
    """Whitespace-split, lowercased tokens."""
    return text.lower().split()


def background_owner(index: int) -> str:
    return f"background_{index}"


def owner_key(owner: Owner) -> str:
    if isinstance(owner, bool):
        raise PromptLookupError(owner)
    if isinstance(owner, int):
        return f"class_{owner}"
    return owner


class TokenEmbeddingTable(TokenCacheMixin):
    """Deterministic unit vectors per token, keyed by ``(seed, token)``."""

    def __init__(
        self,
        seed: int,
        dim: int,
        enable_cache: bool = True,
        cache_maxsize: int = DEFAULT_CACHE_MAXSIZE,
    ) -> None:
        if dim < 1:
            raise DomainError("dim", f"must be positive, got {dim}")
        self.seed = seed
        self.dim = dim
        self._init_cache(enable_cache, cache_maxsize)

    def _draw_token(self, token: str) -> torch.Tensor:
        gen = generator(self.seed, "token", token)
        v = torch.randn(self.dim, generator=gen, dtype=torch.float64)
        return v / torch.linalg.vector_norm(v)

    def vector(self, token: str) -> torch.Tensor:
        return self._lookup_with_cache(token).to(torch.get_default_dtype())

    def embed(self, tokens: Sequence[str]) -> torch.Tensor:
        """Rows of token vectors, shape ``(len(tokens), dim)``."""
        if not tokens:
            return torch.zeros(0, self.dim)
        return torch.stack([self.vector(tok) for tok in tokens])


class TextEncoderBackend(Protocol):
    """Anything that maps context rows and token rows to one embedding."""

    dim: int

    def encode(
        self, context: Optional[torch.Tensor], token_rows: torch.Tensor
    ) -> torch.Tensor: ...


class StubTextEncoder(nn.Module):
    """Frozen seeded linear map over mean-pooled rows, then L2 normalisation."""

    weight: torch.Tensor

    def __init__(self, dim: int, seed: int = 0) -> None:
        super().__init__()
        self.dim = dim
        gen = generator(seed, "text-encoder")
        w = torch.randn(dim, dim, generator=gen, dtype=torch.float64) / math.sqrt(dim)
        self.register_buffer("weight", w.to(torch.get_default_dtype()))

    def encode(
        self, context: Optional[torch.Tensor], token_rows: torch.Tensor
    ) -> torch.Tensor:
        parts = [] if context is None else [context]
        parts.append(token_rows.to(self.weight.dtype))
        rows = torch.cat(parts, dim=0)
        if rows.shape[0] == 0:
            raise DomainError("tokens", "nothing to encode")
        out = self.weight @ rows.mean(dim=0)
        return out / torch.linalg.vector_norm(out)


def encode_text(
    context: Optional[torch.Tensor],
    tokens: Sequence[str],
    table: TokenEmbeddingTable,
    encoder: TextEncoderBackend,
) -> torch.Tensor:
    """Unit-norm embedding of ``[context, tokens]``.

    An empty token list is only valid together with a context.
    """
    if not tokens and context is None:
        raise DomainError("tokens", "empty token list")
    return encoder.encode(context, table.embed(tokens))


@dataclass
class PromptContext:
    """Learnable context rows owned by a class id or a background slot."""

    values: torch.Tensor
    owner: Owner
    frozen: bool = False
    source: Optional[int] = None


class PromptStore(nn.Module):
    """All prompt contexts of the model, with per-owner freeze status."""

    def __init__(self) -> None:
        super().__init__()
        self.contexts = nn.ParameterDict()
        self.frozen: set[str] = set()

    def __contains__(self, owner: object) -> bool:
        return owner_key(owner) in self.contexts  # type: ignore[arg-type]

    def add(self, ctx: PromptContext) -> None:
        key = owner_key(ctx.owner)
        if key in self.contexts:
            raise DomainError("owner", f"{ctx.owner!r} already has a prompt")
        param = nn.Parameter(ctx.values.detach().clone(), requires_grad=not ctx.frozen)
        self.contexts[key] = param
        if ctx.frozen:
            self.frozen.add(key)

    def parameter(self, owner: Owner) -> nn.Parameter:
        key = owner_key(owner)
        if key not in self.contexts:
            raise PromptLookupError(owner)
        return self.contexts[key]

    def get(self, owner: Owner) -> PromptContext:
        param = self.parameter(owner)
        return PromptContext(param, owner, owner_key(owner) in self.frozen)

    def freeze(self, owner: Owner) -> None:
        self.parameter(owner).requires_grad_(False)
        self.frozen.add(owner_key(owner))

    def is_frozen(self, owner: Owner) -> bool:
        return owner_key(owner) in self.frozen

    def background_owners(self) -> list[str]:
        keys = [k for k in self.contexts if k.startswith("background_")]
        return sorted(keys, key=lambda k: int(k.rsplit("_", 1)[1]))

    def class_owners(self) -> list[int]:
        return sorted(int(k[len("class_") :]) for k in self.contexts if k.startswith("class_"))


@dataclass(frozen=True)
class TemplateBank:
    """Frozen per-class template embeddings; never holds a background entry."""

    templates: Mapping[int, torch.Tensor]
    descriptions: tuple[str, ...]

    def __contains__(self, class_id: object) -> bool:
        return class_id in self.templates

    def __getitem__(self, class_id: int) -> torch.Tensor:
        return self.templates[class_id]

    def matrix(self, class_ids: Sequence[int]) -> torch.Tensor:
        missing = [c for c in class_ids if c not in self.templates]
        if missing:
            raise DomainError("class_ids", f"no template for classes {missing}")
        return torch.stack([self.templates[c] for c in class_ids])


@dataclass
class ClassEmbeddingSet:
    """Background embeddings ``(n, C)`` and foreground embeddings ``(N, C)``."""

    background: torch.Tensor
    foreground: torch.Tensor
    class_ids: tuple[int, ...] = field(default_factory=tuple)

    def get(self, class_id: int) -> torch.Tensor:
        return self.foreground[self.class_ids.index(class_id)]

    def stacked(self) -> torch.Tensor:
        return torch.cat([self.background, self.foreground], dim=0)


def load_descriptions(path: Optional[Union[str, Path]] = None) -> tuple[str, ...]:
    """Read one format string per line; every line must contain ``{}``."""
    source = Path(path) if path else DEFAULT_DESCRIPTIONS
    lines = [ln.strip() for ln in source.read_text(encoding="utf-8").splitlines()]
    descriptions = tuple(ln for ln in lines if ln)
    if not descriptions:
        raise DomainError("descriptions", f"{source} holds no description")
    for ln in descriptions:
        if "{}" not in ln:
            raise DomainError("descriptions", f"line {ln!r} has no '{{}}' slot")
    return descriptions


def _as_name_map(class_names: Union[Mapping[int, str], Sequence[str]]) -> dict[int, str]:
    if isinstance(class_names, Mapping):
        return dict(class_names)
    return {i + 1: name for i, name in enumerate(class_names)}


def build_templates(
    class_names: Union[Mapping[int, str], Sequence[str]],
    table: TokenEmbeddingTable,
    encoder: TextEncoderBackend,
    descriptions: Optional[Sequence[str]] = None,
) -> TemplateBank:
    """Average the encodings of every description per class and renormalise."""
    names = _as_name_map(class_names)
    if not names:
        raise DomainError("class_names", "at least one class is required")
    seen: set[str] = set()
    for name in names.values():
        key = name.strip().lower()
        if key == BACKGROUND_NAME:
            raise DomainError("class_names", "templates never cover the background")
        if key in seen:
            raise DomainError("class_names", f"duplicate class name {name!r}")
        seen.add(key)

    descs = tuple(descriptions) if descriptions is not None else load_descriptions()
    templates = {}
    with torch.no_grad():
        for class_id, name in sorted(names.items()):
            encoded = torch.stack(
                [encode_text(None, tokenize(d.format(name)), table, encoder) for d in descs]
            )
            mean = encoded.mean(dim=0)
            templates[class_id] = mean / torch.linalg.vector_norm(mean)
    return TemplateBank(templates, descs)


def build_class_embedding(
    class_id: int,
    store: PromptStore,
    class_names: Mapping[int, str],
    table: TokenEmbeddingTable,
    encoder: TextEncoderBackend,
) -> torch.Tensor:
    """Encode ``[p_c, tokens(name_c)]``; gradients reach unfrozen contexts."""
    context = store.parameter(class_id)
    return encode_text(context, tokenize(class_names[class_id]), table, encoder)


def init_background_prompts(
    n: int,
    seed: int,
    length: int = DEFAULT_CONTEXT_LENGTH,
    dim: int = 64,
) -> list[PromptContext]:
    """``n`` contexts whose flattened vectors are mutually orthogonal.

    Seeded Gaussian draws are orthogonalised by a QR decomposition and
    rescaled so that entries have unit variance.
    """
    size = length * dim
    if n < 1:
        raise DomainError("n", f"need at least one background prompt, got {n}")
    if n > size:
        raise DomainError("n", f"cannot orthogonalise {n} vectors in R^{size}")
    gen = generator(seed, "background-prompts")
    draws = torch.randn(size, n, generator=gen, dtype=torch.float64)
    basis, _ = torch.linalg.qr(draws)
    vectors = basis.T * math.sqrt(size)
    dtype = torch.get_default_dtype()
    return [
        PromptContext(vectors[i].reshape(length, dim).to(dtype), background_owner(i))
        for i in range(n)
    ]


def transfer_weights(
    class_id: int,
    templates: TemplateBank,
    embeddings: ClassEmbeddingSet,
    store: PromptStore,
) -> PromptContext:
    """Initialise ``p_c`` as a copy of the background context closest to ``t*_c``.

    The background prompt itself is left untouched; ties pick the lowest slot.
    """
    if class_id not in templates:
        raise DomainError("class_id", f"no template for class {class_id}")
    target = templates[class_id]
    owners = store.background_owners()
    if len(owners) != embeddings.background.shape[0]:
        raise DomainError(
            "embeddings",
            f"{embeddings.background.shape[0]} background embeddings for "
            f"{len(owners)} background prompts",
        )
    with torch.no_grad():
        scores = [float(cosine_sim(b, target.to(b.dtype))) for b in embeddings.background]
    best = 0
    for i, score in enumerate(scores):
        if score > scores[best]:
            best = i
    source = store.parameter(owners[best])
    ctx = PromptContext(source.detach().clone(), class_id, source=best)
    store.add(ctx)
    logger.debug("class %s initialised from %s (cos=%.4f)", class_id, owners[best], scores[best])
    return ctx


class PartitionLike(Protocol):
    def classes_until(self, step: int) -> list[int]: ...


def freeze_step_prompts(step: int, partition: PartitionLike, store: PromptStore) -> None:
    """Freeze every class prompt of ``C^{1:t-1}``; background stays trainable."""
    if step < 2:
        return
    for class_id in partition.classes_until(step - 1):
        if class_id in store:
            store.freeze(class_id)


class TextBank(nn.Module):
    """Prompts, frozen encoder and templates for one class vocabulary."""

    def __init__(
        self,
        class_names: Union[Mapping[int, str], Sequence[str]],
        dim: int,
        seed: int = 0,
        context_length: int = DEFAULT_CONTEXT_LENGTH,
        num_background: int = DEFAULT_NUM_BACKGROUND,
        context_std: float = 0.02,
        descriptions: Optional[Sequence[str]] = None,
        backend: Optional[TextEncoderBackend] = None,
    ) -> None:
        super().__init__()
        self.class_names = _as_name_map(class_names)
        self.dim = dim
        self.seed = seed
        self.context_length = context_length
        self.context_std = context_std
        self.table = TokenEmbeddingTable(seed, dim)
        self.encoder = backend if backend is not None else StubTextEncoder(dim, seed)
        self.templates = build_templates(self.class_names, self.table, self.encoder, descriptions)
        self.prompts = PromptStore()
        for ctx in init_background_prompts(num_background, seed, context_length, dim):
            self.prompts.add(ctx)

    @property
    def num_background(self) -> int:
        return len(self.prompts.background_owners())

    def add_class_prompt(self, class_id: int) -> PromptContext:
        """Fresh random context for a class, scaled by ``context_std``."""
        if class_id not in self.class_names:
            raise DomainError("class_id", f"unknown class {class_id}")
        gen = torch.Generator().manual_seed(derive_seed(self.seed, "class-prompt", class_id))
        values = torch.randn(self.context_length, self.dim, generator=gen, dtype=torch.float64)
        ctx = PromptContext((values * self.context_std).to(torch.get_default_dtype()), class_id)
        self.prompts.add(ctx)
        return ctx

    def background_embeddings(self) -> torch.Tensor:
        return torch.stack(
            [
                encode_text(self.prompts.parameter(owner), [], self.table, self.encoder)
                for owner in self.prompts.background_owners()
            ]
        )

    def embeddings(self, class_ids: Sequence[int]) -> ClassEmbeddingSet:
        """Recompute every embedding so gradients reach unfrozen contexts."""
        background = self.background_embeddings()
        if class_ids:
            foreground = torch.stack(
                [
                    build_class_embedding(c, self.prompts, self.class_names, self.table, self.encoder)
                    for c in class_ids
                ]
            )
        else:
            foreground = background.new_zeros(0, self.dim)
        return ClassEmbeddingSet(background, foreground, tuple(class_ids))

    def template_matrix(self, class_ids: Sequence[int]) -> torch.Tensor:
        return self.templates.matrix(class_ids)
