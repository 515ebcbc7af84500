"""Per-item child seeds so parallel work reproduces sequential results.

Every randomized unit of work (one tree, one phantom case) draws from its own
generator seeded by ``mix_seed(root_seed, index)``; no generator is shared
across workers, so results are independent of scheduling and thread count.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN_GAMMA = 0x9E3779B97F4A7C15


def mix_seed(seed: int, index: int) -> int:
    """SplitMix64 finalizer applied to ``seed + (index + 1) * gamma``."""
    z = (int(seed) + (int(index) + 1) * _GOLDEN_GAMMA) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def child_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix_seed(seed, index)))
