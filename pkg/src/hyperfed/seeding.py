"""Deterministic random-stream derivation.

Every stochastic component draws from a ``numpy.random.Generator`` derived
from a master seed plus a tuple of context keys (client id, round number,
purpose tag, ...). Streams are independent of each other and of evaluation
order, which is what makes whole experiments replayable bit for bit.
"""
from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        return int(key) & 0xFFFFFFFFFFFFFFFF
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"stream keys must be int or str, got {type(key).__name__}")


def stream(*keys) -> np.random.Generator:
    """Build a generator deterministically identified by ``keys``."""
    if not keys:
        raise ValueError("at least one key is required")
    entropy = [_key_to_int(k) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))
