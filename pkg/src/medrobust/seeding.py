"""Stable identifier hashing and counter-based random streams."""

from __future__ import annotations

import hashlib

import numpy as np

UINT64_MASK = (1 << 64) - 1


def stable_hash64(*parts) -> int:
    """64-bit unsigned hash of ``parts``; independent of process and platform."""
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x1f")
    return int.from_bytes(h.digest(), "little")


def application_seed(master_seed: int, dataset_id: str, sample_id: str,
                     perturbation_id: str, level: int) -> int:
    return stable_hash64(int(master_seed) & UINT64_MASK, dataset_id, sample_id,
                         perturbation_id, int(level))


def stream(seed: int, salt: str) -> np.random.Generator:
    """Philox generator keyed by ``(seed, hash(salt))``.

    Each perturbation kind draws from its own key so a seed gives the same
    realization no matter which intensity is being evaluated.
    """
    key = np.array([int(seed) & UINT64_MASK, stable_hash64(salt)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
