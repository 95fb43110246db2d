"""Reproducible random streams for path-parallel Monte Carlo.

Paths are grouped into fixed-size blocks.  Block ``j`` draws from a Philox
(counter-based) generator keyed by ``(seed, stream, j)``, so the numbers a
path sees depend only on the seed and its index, never on how many worker
threads run the blocks or in which order they finish.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor

import numpy as np

BLOCK = 8192

BROWNIAN = 0
ORACLE = 1
VALIDATION = 2


def block_generator(seed: int, block: int, stream: int = BROWNIAN) -> np.random.Generator:
    seq = np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(stream), int(block)])
    return np.random.Generator(np.random.Philox(seq))


def blocks(n_paths: int, block: int = BLOCK):
    """Yield ``(block_index, start, stop)`` covering ``range(n_paths)``."""
    for j, start in enumerate(range(0, n_paths, block)):
        yield j, start, min(start + block, n_paths)


def map_blocks(fn, n_paths: int, threads: int = 1, block: int = BLOCK):
    """Run ``fn(block_index, start, stop)`` over all blocks; results in block order."""
    spans = list(blocks(n_paths, block))
    if threads <= 1 or len(spans) <= 1:
        return [fn(*span) for span in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda span: fn(*span), spans))
