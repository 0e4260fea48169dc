"""Mixins for the text bank."""

from .cache import TokenCacheMixin

__all__ = ["TokenCacheMixin"]
