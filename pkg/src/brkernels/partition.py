"""Deterministic, block-contiguous work splitting shared by the kernels."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor


def split_evenly(n_items: int, workers: int) -> list[range]:
    """Split [0, n_items) into ``workers`` contiguous ranges, sizes differing by <= 1."""
    if n_items < 0:
        raise ValueError(f"n_items must be >= 0, got {n_items}")
    if workers < 1:
        raise ValueError(f"workers must be >= 1, got {workers}")
    base, extra = divmod(n_items, workers)
    ranges = []
    start = 0
    for w in range(workers):
        size = base + (1 if w < extra else 0)
        ranges.append(range(start, start + size))
        start += size
    return ranges


def partition_work_2d(k_blocks: int, n_blocks: int, workers: int) -> list[range]:
    """Partition the k_blocks x n_blocks output grid over workers.

    Items are flat indices ``ib_k * n_blocks + ib_n`` (mini-batch dimension
    innermost so a worker reuses one weight slice across its ib_n range).
    The split is block-contiguous, deterministic, exact and non-overlapping.
    """
    if k_blocks < 1 or n_blocks < 1:
        raise ValueError(f"grid extents must be >= 1, got ({k_blocks}, {n_blocks})")
    return split_evenly(k_blocks * n_blocks, workers)


def run_on_workers(fn, ranges: list[range]) -> None:
    """Run ``fn(worker_index, rng)`` for every non-empty range, threaded if > 1.

    Worker indices keep their original slot even when some ranges are empty,
    so instrumentation keys are stable across worker counts.
    """
    live = [(w, r) for w, r in enumerate(ranges) if len(r)]
    if len(live) <= 1:
        for w, r in live:
            fn(w, r)
        return
    with ThreadPoolExecutor(max_workers=len(live)) as pool:
        futures = [pool.submit(fn, w, r) for w, r in live]
        for fut in futures:
            fut.result()
