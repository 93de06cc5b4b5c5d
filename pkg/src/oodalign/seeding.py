"""Deterministic seed derivation.

Every random draw in the package flows from a single config seed through
`derive_rng`, keyed by a purpose string plus integers (epoch, scene id,
object index, ...).  Keyed hashing gives independent, platform-stable
streams without any shared mutable RNG state, so resuming a run mid-way
reproduces the remaining draws exactly.
"""

import hashlib

import numpy as np


def derive_seed(seed: int, *key: object) -> int:
    """Collapse (seed, key parts) into a 64-bit sub-seed via blake2b."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(seed)).encode())
    for part in key:
        h.update(b"\x1f")
        h.update(str(part).encode())
    return int.from_bytes(h.digest(), "little")


def derive_rng(seed: int, *key: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *key))
