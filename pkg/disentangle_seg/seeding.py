"""Named sub-seeds derived from one master seed."""

import hashlib

import torch

SEED_MASK = (1 << 63) - 1


def derive_seed(seed: int, *names: object) -> int:
    """Stable 63-bit seed for ``(seed, *names)``."""
    key = "\x00".join([str(seed), *map(str, names)]).encode("utf-8")
    digest = hashlib.blake2b(key, digest_size=8).digest()
    return int.from_bytes(digest, "little") & SEED_MASK


def generator(seed: int, *names: object) -> torch.Generator:
    """A CPU generator seeded from :func:`derive_seed`."""
    return torch.Generator().manual_seed(derive_seed(seed, *names))
