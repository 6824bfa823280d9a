"""Seeded randomness.  Everything draws from Philox, a counter-based generator."""

import numpy as np


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    """Return an independent generator for ``(seed, stream)``."""
    return np.random.Generator(np.random.Philox(key=[int(seed) & (2**64 - 1), int(stream)]))
