"""Seed handling.

Every stochastic routine in the package takes an explicit
:class:`numpy.random.Generator`. Independent streams (trials, algorithms,
warm-up runs) are derived from a root seed plus integer keys through
:class:`numpy.random.SeedSequence`, so that streams never overlap and the
result does not depend on execution order.
"""

from __future__ import annotations

import numpy as np


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """Return a generator for the stream identified by ``(seed, *keys)``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, keys)]))
