"""Reproducible random streams.

All randomness in the package flows through Philox keyed by
(seed, mixed stream index). Philox is counter-based, so streams derived
from the same (seed, indices) reproduce bit-exactly across platforms and
are independent of the order in which they are created.
"""

from __future__ import annotations

import numpy as np

_MASK = (1 << 64) - 1


def _mix(indices) -> int:
    # splitmix64-style combine of an index tuple into one 64-bit word
    h = 0x9E3779B97F4A7C15
    for i in indices:
        h = (h ^ (int(i) & _MASK)) * 0xBF58476D1CE4E5B9 & _MASK
        h = (h ^ (h >> 31)) * 0x94D049BB133111EB & _MASK
    return h ^ (h >> 29)


def stream(seed: int, *indices: int) -> np.random.Generator:
    """Independent generator for (seed, *indices)."""
    key = np.array([int(seed) & _MASK, _mix(indices)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
