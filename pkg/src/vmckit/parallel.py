"""Deterministic chunked map over sample batches.

Chunk boundaries depend only on the batch size, never on the thread count,
so every floating-point operation is identical whatever ``threads`` is and
results are byte-for-byte reproducible.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

CHUNK_SIZE = 256

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def map_chunks(fn, n: int, threads: int | None = None, chunk_size: int = CHUNK_SIZE):
    """Apply ``fn(slice)`` over fixed chunks of ``range(n)`` and concatenate.

    ``fn`` returns an array or a tuple of arrays whose leading axis is the
    chunk length.
    """
    threads = _threads if threads is None else threads
    slices = [slice(i, min(i + chunk_size, n)) for i in range(0, n, chunk_size)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(fn, slices))
    else:
        parts = [fn(s) for s in slices]
    if isinstance(parts[0], tuple):
        return tuple(np.concatenate(p, axis=0) for p in zip(*parts))
    return np.concatenate(parts, axis=0)
