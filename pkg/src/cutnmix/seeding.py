"""Deterministic RNG streams split from one run seed.

Every stream is keyed by ``(seed, purpose, *indices)`` through
``numpy.random.SeedSequence``, so any epoch or step can be regenerated
without replaying earlier ones (which is what makes resuming exact).
"""

from __future__ import annotations

import numpy as np

INIT = 0
DISTORT = 1
MIX = 2
SHUFFLE = 3
TEACHER_INIT = 4
DATA = 5


def stream(seed: int, purpose: int, *indices: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), purpose, *map(int, indices)]))


def torch_seed(seed: int, purpose: int, *indices: int) -> int:
    state = np.random.SeedSequence([int(seed), purpose, *map(int, indices)]).generate_state(2, dtype=np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1
