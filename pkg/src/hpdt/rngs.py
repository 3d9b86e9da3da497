"""Deterministic RNG derivation: one master seed, documented substreams.

Every source of randomness in the package is a numpy Generator obtained from
derive_rng(seed, *keys). Identical (seed, keys) always yield the same stream,
independent of call order, which makes batches, datasets, and evaluations
reproducible bit for bit and safely parallelizable.
"""

from __future__ import annotations

import hashlib

import numpy as np


def _key_to_int(key) -> int:
    if isinstance(key, (int, np.integer)):
        if key < 0:
            raise ValueError("derivation keys must be non-negative integers or strings")
        return int(key)
    if isinstance(key, str):
        digest = hashlib.sha256(key.encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")
    raise TypeError(f"unsupported rng derivation key {key!r}")


def derive_seed_sequence(seed: int, *keys) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(_key_to_int(k) for k in keys))


def derive_rng(seed: int, *keys) -> np.random.Generator:
    return np.random.default_rng(derive_seed_sequence(seed, *keys))
