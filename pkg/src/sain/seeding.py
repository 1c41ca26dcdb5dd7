"""Named sub-seed derivation so every source of randomness (split, init,
shuffle, dropout) flows from the single run seed and can be reproduced in
isolation."""

from __future__ import annotations

import numpy as np

STREAMS = {"split": 0, "init": 1, "shuffle": 2, "dropout": 3, "sweep": 4}


def derive_seed(seed: int, stream: str, *extra: int) -> int:
    """Deterministically derive an independent integer seed for a named stream.
    Extra integers (for example a sweep's K value and repeat index) extend the
    entropy key."""
    if stream not in STREAMS:
        raise ValueError(f"unknown seed stream: {stream!r}")
    ss = np.random.SeedSequence([int(seed), STREAMS[stream], *map(int, extra)])
    return int(ss.generate_state(1, np.uint64)[0])


def stream_rng(seed: int, stream: str, *extra: int) -> np.random.Generator:
    """Generator for a named stream of the given run seed."""
    return np.random.default_rng(derive_seed(seed, stream, *extra))
