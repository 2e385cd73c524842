"""Seeded random streams.

Every random consumer (parameter init, dropout masks, target sampling,
batch shuffling, synthetic data) draws from numpy's PCG64 bit generator,
keyed by ``SeedSequence([seed, stream])``. PCG64 output is specified and
stable across platforms and numpy versions, so a seed reproduces a run.
"""

from __future__ import annotations

import numpy as np

INIT = 0
DROPOUT = 1
SAMPLING = 2
SHUFFLE = 3
DATA = 4


def make_rng(seed: int, stream: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, stream])))
