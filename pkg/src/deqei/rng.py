"""Seeded, named random streams on the counter-based Philox generator.

Every stochastic component draws from ``stream(root_seed, name, counter)`` so
that data, initialization, noise and group sampling can be varied
independently and a training run can be resumed from a step counter alone.
"""

import numpy as np


def fnv1a64(data: bytes) -> int:
    h = 0xCBF29CE484222325
    for byte in data:
        h ^= byte
        h = (h * 0x100000001B3) & 0xFFFFFFFFFFFFFFFF
    return h


def stream(seed: int, name: str = "", counter: int = 0) -> np.random.Generator:
    key = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, fnv1a64(name.encode()), int(counter)])
    return np.random.Generator(np.random.Philox(key))
