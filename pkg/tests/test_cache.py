"""Tests for token cache functionality."""

import unittest

import torch

from disentangle_seg.mixins import TokenCacheMixin
from disentangle_seg.text_bank import TokenEmbeddingTable


class TestCacheBasic(unittest.TestCase):
    """Test basic cache functionality."""

    def test_cache_enabled_by_default(self):
        """Test that the token table caches by default."""
        table = TokenEmbeddingTable(seed=0, dim=8)
        self.assertTrue(table.is_cache_enabled)

    def test_disable_cache_on_init(self):
        """Test disabling the cache on initialization."""
        table = TokenEmbeddingTable(seed=0, dim=8, enable_cache=False)
        self.assertFalse(table.is_cache_enabled)

    def test_enable_cache_at_runtime(self):
        """Test enabling cache at runtime."""
        table = TokenEmbeddingTable(seed=0, dim=8, enable_cache=False)
        table.enable_cache(maxsize=64)
        self.assertTrue(table.is_cache_enabled)
        self.assertEqual(table.cache_info()["maxsize"], 64)

    def test_disable_cache(self):
        """Test disabling cache."""
        table = TokenEmbeddingTable(seed=0, dim=8)
        table.disable_cache()
        self.assertFalse(table.is_cache_enabled)

    def test_draw_must_be_overridden(self):
        """Test that the bare mixin has no token source."""
        mixin = TokenCacheMixin()
        mixin._init_cache(enable_cache=False)
        with self.assertRaises(NotImplementedError):
            mixin._lookup_with_cache("red")


class TestCacheInfo(unittest.TestCase):
    """Test cache info functionality."""

    def test_cache_info_when_disabled(self):
        """Test that cache_info returns None when cache is disabled."""
        table = TokenEmbeddingTable(seed=0, dim=8, enable_cache=False)
        self.assertIsNone(table.cache_info())

    def test_cache_hits_and_misses(self):
        """Test that cache tracks hits and misses correctly."""
        table = TokenEmbeddingTable(seed=0, dim=8)

        # First lookup - miss
        table.vector("circle")
        info = table.cache_info()
        self.assertEqual(info["misses"], 1)
        self.assertEqual(info["hits"], 0)

        # Second lookup - hit
        table.vector("circle")
        info = table.cache_info()
        self.assertEqual(info["misses"], 1)
        self.assertEqual(info["hits"], 1)

    def test_embed_counts_every_token(self):
        """Test that embedding a sentence looks up each token."""
        table = TokenEmbeddingTable(seed=0, dim=8)
        table.embed(["a", "red", "a"])
        info = table.cache_info()
        self.assertEqual(info["misses"], 2)
        self.assertEqual(info["hits"], 1)
        self.assertEqual(info["currsize"], 2)


class TestCacheClear(unittest.TestCase):
    """Test cache clear functionality."""

    def test_clear_cache(self):
        """Test clearing the cache."""
        table = TokenEmbeddingTable(seed=0, dim=8)
        table.vector("square")
        self.assertEqual(table.cache_info()["currsize"], 1)

        table.clear_cache()
        self.assertEqual(table.cache_info()["currsize"], 0)


class TestCachedValues(unittest.TestCase):
    """Test that caching never changes the vectors."""

    def test_cached_equals_uncached(self):
        """Test bit-identical vectors with and without the cache."""
        cached = TokenEmbeddingTable(seed=3, dim=16)
        plain = TokenEmbeddingTable(seed=3, dim=16, enable_cache=False)
        for token in ("red", "square", "red", "photo"):
            self.assertTrue(torch.equal(cached.vector(token), plain.vector(token)))

    def test_vectors_are_unit_norm(self):
        """Test that token vectors have unit length."""
        table = TokenEmbeddingTable(seed=0, dim=16)
        norm = torch.linalg.vector_norm(table.vector("hexagon").double())
        self.assertAlmostEqual(float(norm), 1.0, places=6)

    def test_seed_changes_vectors(self):
        """Test that different seeds give different tables."""
        a = TokenEmbeddingTable(seed=0, dim=16).vector("red")
        b = TokenEmbeddingTable(seed=1, dim=16).vector("red")
        self.assertFalse(torch.equal(a, b))

    def test_empty_embed(self):
        """Test the shape of an empty token list."""
        self.assertEqual(TokenEmbeddingTable(seed=0, dim=8).embed([]).shape, (0, 8))


if __name__ == "__main__":
    unittest.main()
