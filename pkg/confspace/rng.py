"""
Reproducible random streams.

Every sampler, shard and path draws from its own counter-based Philox stream
keyed by (seed, stream id), so results do not depend on how work is split
between processes. There is no global generator.
"""

from typing import List

import numpy as np

__all__ = ["stream", "streams"]


def stream(seed: int, stream_id: int = 0) -> np.random.Generator:
    """
    Generator over Philox keyed by the pair (stream_id, seed).

    :param seed: run seed, any non-negative integer below 2**64.
    :param stream_id: index of the independent stream (shard, chain, path).
    """
    if seed < 0 or stream_id < 0:
        raise ValueError(f"seed and stream id must be non-negative, got {seed}, {stream_id}")
    key = np.array([stream_id, seed], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def streams(seed: int, count: int, first: int = 0) -> List[np.random.Generator]:
    """
    `count` consecutive streams starting at id `first`, one per path or sample.
    """
    return [stream(seed, first + k) for k in range(count)]
