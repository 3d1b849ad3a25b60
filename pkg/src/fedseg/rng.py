"""Seeded random streams.

Every stochastic operation takes an explicit :class:`numpy.random.Generator`
backed by the counter-based Philox bit generator.  Streams are derived from a
64-bit root seed plus integer keys, so the stream a client sees in round 3 does
not depend on how many draws other clients made.
"""

from __future__ import annotations

import numpy as np

SEED_MASK = (1 << 64) - 1


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    entropy = [int(seed) & SEED_MASK, *(int(k) & SEED_MASK for k in keys)]
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
