"""Counter-based random streams.

Every random draw in training is addressed by ``(seed, purpose, *counters)``
so that a draw never depends on how many draws happened before it. This is
what makes resume-from-checkpoint bitwise identical and lets data assembly
for step t+1 run ahead of step t.
"""

from __future__ import annotations

import zlib

import numpy as np

DATA = "data"
LTD = "ltd"
BYPASS = "bypass"
INIT = "init"

_MASK64 = (1 << 64) - 1


def _purpose_code(purpose: str) -> int:
    return zlib.crc32(purpose.encode("utf-8"))


def stream(seed: int, purpose: str, *counters: int) -> np.random.Generator:
    """Philox generator keyed by (seed, purpose) and positioned by up to three counters."""
    if len(counters) > 3:
        raise ValueError("at most three counters")
    key = np.array([int(seed) & _MASK64, _purpose_code(purpose)], dtype=np.uint64)
    # word 0 is the block counter Philox advances; the caller's counters sit above it
    counter = np.zeros(4, dtype=np.uint64)
    for i, c in enumerate(counters):
        if c < 0:
            raise ValueError("counters must be non-negative")
        counter[i + 1] = int(c) & _MASK64
    return np.random.Generator(np.random.Philox(counter=counter, key=key))
