"""Deterministic seed derivation.

A single experiment seed is fanned out to every randomized component by
hashing ``"<seed>/<label>"`` with SHA-256 and taking the first 8 bytes.
Labels are stable strings like ``"corpus"`` or ``"stage2/step1234"``, so
reruns with the same config reproduce every stream bit for bit while
distinct components never share a stream.
"""

from __future__ import annotations

import hashlib

import numpy as np


def derive_seed(seed: int, label: str) -> int:
    """Map (seed, label) to an independent 64-bit stream seed."""
    digest = hashlib.sha256(f"{seed}/{label}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def derive_rng(seed: int, label: str) -> np.random.Generator:
    """Fresh generator for the stream identified by ``label``."""
    return np.random.default_rng(derive_seed(seed, label))
