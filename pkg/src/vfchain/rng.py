"""Seed derivation so every stage owns an independent, labelled stream."""

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Return a 64-bit seed derived from ``seed`` and a stage label."""
    digest = hashlib.sha256(f"{int(seed)}/{label}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def stage_rng(seed: int, label: str) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, label))
