"""Deterministic seed derivation.

All randomness in the package flows from numpy Generators whose seeds are
derived with a fixed 64-bit mix (splitmix64), so that adding or removing
one consumer never shifts the draws of another.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return (z ^ (z >> 31)) & _MASK


def mix64(*values: int) -> int:
    """Fold integers into one 64-bit seed; order-sensitive and collision-resistant."""
    h = 0
    for v in values:
        h = _splitmix64((h ^ (int(v) & _MASK)) & _MASK)
    return h


def tag(name: str) -> int:
    """Stable integer tag for a component name (CRC32 of the UTF-8 bytes)."""
    return zlib.crc32(name.encode("utf-8"))


def component_rng(seed: int, name: str) -> np.random.Generator:
    """Generator for one named component, independent of all other components."""
    return np.random.default_rng(mix64(seed, tag(name)))
