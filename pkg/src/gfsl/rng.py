"""Seeded random streams.

Every random draw in the package comes from a Philox (counter-based) generator
keyed by the run seed plus a tuple of stream labels, so independent streams
(per task, per batch, per epoch) never depend on call order.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _word(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    digest = hashlib.sha256(str(key).encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def stream(seed: int, *keys) -> np.random.Generator:
    """Generator for the stream named by ``keys`` under ``seed``."""
    words = [_word(seed)] + [_word(k) for k in keys]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


def derive_seed(seed: int, *keys) -> int:
    """A 63-bit child seed, for APIs that take an integer seed."""
    return int(stream(seed, "derive", *keys).integers(0, 2**63 - 1))
