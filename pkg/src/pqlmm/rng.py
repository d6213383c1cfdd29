"""Reproducible random streams.

Streams are Philox (counter-based) generators keyed by ``(seed, *keys)``, so
any replicate's randomness depends only on its own key and never on how many
other streams were consumed before it or on which worker runs it.
"""
from __future__ import annotations

import numpy as np

# stream purposes
TRUE_EFFECTS = 0
REPLICATE = 1
MIXTURE = 2


def stream(seed, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, *keys)``.

    ``seed`` may be an integer or a tuple of integers (e.g. ``(seed, replicate)``).
    """
    entropy = [int(s) for s in seed] if isinstance(seed, (tuple, list)) else int(seed)
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=tuple(int(k) for k in keys))
    return np.random.Generator(np.random.Philox(ss))


def fresh_seed() -> int:
    """Draw a seed from OS entropy (for callers that did not pass one)."""
    return int(np.random.SeedSequence().entropy % (2**63))
