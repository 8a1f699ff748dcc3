"""Named, independent random streams derived from one integer seed."""
from __future__ import annotations

import hashlib

import numpy as np


def stream_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def rng_stream(seed: int, name: str) -> np.random.Generator:
    """``hash(seed, name)`` seeding, so each stage reproduces on its own."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), stream_key(name)]))


def item_rng(seed: int, name: str, index: int) -> np.random.Generator:
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & (2**64 - 1), stream_key(name), int(index)])
    )
