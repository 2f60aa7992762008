"""Named, reproducible random streams.

Every stochastic component draws from its own stream, derived from the run
seed plus a stream id and optional indices (epoch, shard, ...). Seeds are
expanded by ``SeedSequence`` and drive the counter-based Philox generator, so
a stream's output depends only on its key, never on how many draws other
components made first.
"""

from __future__ import annotations

from enum import IntEnum

import numpy as np


class Stream(IntEnum):
    """Stream identifiers; values are part of the reproducibility contract."""

    DATA = 0
    INIT = 1
    SHUFFLE = 2
    TARGET = 3
    DROPOUT = 4
    MONTE_CARLO = 5
    GRAD_CHECK = 6


def make_rng(seed: int, stream: Stream | int = Stream.DATA, *indices: int) -> np.random.Generator:
    """Return the generator for ``(seed, stream, *indices)``."""

    if seed < 0:
        raise ValueError(f"seed must be non-negative, got {seed}")
    key = (int(stream), *(int(i) for i in indices))
    sequence = np.random.SeedSequence(entropy=int(seed), spawn_key=key)
    return np.random.Generator(np.random.Philox(sequence))


def shard_sizes(total: int, shard_size: int) -> list[int]:
    """Split ``total`` draws into fixed-size shards (last one may be short)."""

    if total < 0 or shard_size < 1:
        raise ValueError("total must be >= 0 and shard_size >= 1")
    full, rest = divmod(total, shard_size)
    return [shard_size] * full + ([rest] if rest else [])


__all__ = ["Stream", "make_rng", "shard_sizes"]
