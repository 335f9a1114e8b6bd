"""Deterministic RNG derivation: one root seed, labeled child streams."""

import hashlib

import numpy as np


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Child generator for (seed, label); identical inputs give identical streams."""
    digest = hashlib.sha256(label.encode("utf-8")).digest()[:8]
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, int.from_bytes(digest, "little")]
    return np.random.default_rng(np.random.SeedSequence(entropy))
