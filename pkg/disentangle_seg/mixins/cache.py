"""Memoised token draws for embedding tables."""

from functools import lru_cache
from typing import Any, Optional

import torch

DEFAULT_CACHE_MAXSIZE = 4096


class TokenCacheMixin:
    """
    Keeps drawn token vectors in an LRU cache keyed by the token string.

    A draw re-seeds a generator and samples one normal vector, so building
    templates for many classes repeats the same draws for shared words like
    "a", "photo" or "of". Host classes implement ``_draw_token`` and call
    ``_init_cache`` from their constructor.

    Usage:
        table = TokenEmbeddingTable(seed=0, dim=64, cache_maxsize=1024)
        table.embed(["a", "photo", "of", "a", "circle"])
        table.cache_info()["hits"]  # 1
    """

    _cache_enabled: bool
    _cache_maxsize: int
    _cached_draw: Any

    def _init_cache(
        self, enable_cache: bool = True, cache_maxsize: int = DEFAULT_CACHE_MAXSIZE
    ) -> None:
        self._cache_maxsize = cache_maxsize
        self._cached_draw = None
        self._cache_enabled = False
        if enable_cache:
            self.enable_cache()

    def _draw_token(self, token: str) -> torch.Tensor:
        raise NotImplementedError("Subclass must implement _draw_token")

    def _lookup_with_cache(self, token: str) -> torch.Tensor:
        if self._cached_draw is None:
            return self._draw_token(token)
        vector: torch.Tensor = self._cached_draw(token)
        return vector

    def enable_cache(self, maxsize: Optional[int] = None) -> None:
        """(Re)build the cache; drawn vectors are forgotten."""
        if maxsize is not None:
            self._cache_maxsize = maxsize
        self._cached_draw = lru_cache(maxsize=self._cache_maxsize)(self._draw_token)
        self._cache_enabled = True

    def disable_cache(self) -> None:
        self._cached_draw = None
        self._cache_enabled = False

    def clear_cache(self) -> None:
        if self._cached_draw is not None:
            self._cached_draw.cache_clear()

    def cache_info(self) -> Optional[dict[str, int]]:
        """Hits, misses, maxsize and currsize; None while disabled."""
        if self._cached_draw is None:
            return None
        hits, misses, maxsize, currsize = self._cached_draw.cache_info()
        return {
            "hits": hits,
            "misses": misses,
            "maxsize": maxsize or 0,
            "currsize": currsize,
        }

    @property
    def is_cache_enabled(self) -> bool:
        return self._cache_enabled
