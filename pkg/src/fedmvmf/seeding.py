"""Named deterministic random sub-streams derived from one root seed.

Each component draws from its own stream so that perturbing one (say,
participation sampling) never shifts the randomness of another (say,
model initialization).
"""

from __future__ import annotations

import numpy as np

STREAMS = {
    "init": 0,
    "signature": 1,
    "participation": 2,
    "split": 3,
    "synthetic": 4,
    "holdout": 5,
    "baseline": 6,
}


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Generator for the named stream; extra ints refine it further
    (e.g. a per-user stream for splitting)."""
    return np.random.default_rng([seed, STREAMS[name], *extra])
