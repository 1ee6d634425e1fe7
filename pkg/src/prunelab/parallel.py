"""Optional fan-out over sample chunks, capped by ``PRUNELAB_THREADS``."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def worker_count():
    try:
        return max(1, int(os.environ.get("PRUNELAB_THREADS", "1")))
    except ValueError:
        return 1


def map_chunks(fn, n, chunk):
    """Apply ``fn(slice)`` over ``range(n)`` in chunks and concatenate the array results in order."""
    slices = [slice(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    workers = min(worker_count(), len(slices))
    if workers <= 1:
        parts = [fn(s) for s in slices]
    else:
        with ThreadPoolExecutor(workers) as pool:
            parts = list(pool.map(fn, slices))
    return np.concatenate(parts) if parts else np.zeros(0)
