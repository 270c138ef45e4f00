"""Fork-join primitives over flat key arrays: sort, merge join, unique filter.

The pattern is always the same: the input is cut into blocks of at most
``block_size`` bytes, a pool of ``worker_count`` threads works on the
blocks independently (fork), and pairwise merge levels combine the block
results (join).  An odd block is carried to the next level unmerged.
The merge levels for sorting run inside two pre-sized buffers that flip
roles per level, so no level allocates result storage beyond that pair.

Results never depend on ``worker_count`` or ``block_size``; both only
shape the execution.  The kernels are numpy-vectorized, which also means
block work drops the interpreter lock and threads can genuinely overlap.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

DEFAULT_BLOCK_SIZE = 8 * 2**20  # 8 MiB
DEFAULT_WORKERS = os.cpu_count() or 1

_KEY_DTYPES = (np.dtype(np.uint32), np.dtype(np.uint64))


@dataclass
class ForkJoinConfig:
    worker_count: int = DEFAULT_WORKERS
    block_size: int = DEFAULT_BLOCK_SIZE
    debug: bool = False  # validate preconditions such as sortedness

    def __post_init__(self):
        if self.worker_count < 1:
            raise ValueError("worker_count must be >= 1")
        if self.block_size < 1:
            raise ValueError("block_size must be >= 1")


def _check_keys(keys: np.ndarray) -> np.ndarray:
    keys = np.ascontiguousarray(keys)
    if keys.ndim != 1 or keys.dtype not in _KEY_DTYPES:
        raise TypeError("keys must be a 1-d array of uint32 or uint64")
    return keys


def _block_bounds(n: int, itemsize: int, cfg: ForkJoinConfig) -> list[int]:
    """Partition [0, n) into byte-bounded blocks; returns boundary offsets."""
    per_block = max(1, cfg.block_size // itemsize)
    bounds = list(range(0, n, per_block))
    bounds.append(n)
    return bounds


def _run_tasks(tasks, cfg: ForkJoinConfig) -> list:
    """Execute thunks, threaded when the config asks for workers."""
    if cfg.worker_count == 1 or len(tasks) <= 1:
        return [t() for t in tasks]
    with ThreadPoolExecutor(max_workers=min(cfg.worker_count, len(tasks))) as pool:
        futures = [pool.submit(t) for t in tasks]
        return [f.result() for f in futures]


def _merge_into(src: np.ndarray, dst: np.ndarray, lo: int, mid: int, hi: int) -> None:
    """Merge two sorted runs src[lo:mid], src[mid:hi] into dst[lo:hi]."""
    a = src[lo:mid]
    b = src[mid:hi]
    out = dst[lo:hi]
    if len(a) == 0 or len(b) == 0:
        out[: len(a)] = a
        out[len(a):] = b
        return
    at = np.searchsorted(a, b, side="right") + np.arange(len(b), dtype=np.intp)
    taken = np.zeros(len(out), dtype=bool)
    taken[at] = True
    out[at] = b
    out[~taken] = a


@dataclass
class SortStats:
    """Filled in by parallel_sort when passed; test hooks."""

    partitions: int = 0
    merge_levels: int = 0
    buffer_allocations: int = 0


def parallel_sort(keys: np.ndarray, cfg: ForkJoinConfig | None = None,
                  stats: SortStats | None = None) -> np.ndarray:
    """Sort unsigned keys: blockwise local sorts, then merge levels.

    A single-block input degenerates to one local sort.  Multi-block
    inputs run entirely inside two buffers allocated up front; merge
    levels only flip which buffer is source and which is destination.
    """
    cfg = cfg or ForkJoinConfig()
    keys = _check_keys(keys)
    n = len(keys)
    bounds = _block_bounds(n, keys.itemsize, cfg)
    if stats is not None:
        stats.partitions = len(bounds) - 1
    if len(bounds) <= 2:
        return np.sort(keys)

    src = np.empty(n, dtype=keys.dtype)
    dst = np.empty(n, dtype=keys.dtype)
    if stats is not None:
        stats.buffer_allocations = 2

    def sort_block(lo: int, hi: int):
        src[lo:hi] = np.sort(keys[lo:hi])

    _run_tasks(
        [lambda lo=lo, hi=hi: sort_block(lo, hi) for lo, hi in zip(bounds, bounds[1:])],
        cfg,
    )

    runs = bounds
    while len(runs) > 2:
        tasks = []
        next_runs = [runs[0]]
        i = 0
        while i + 2 < len(runs):
            lo, mid, hi = runs[i], runs[i + 1], runs[i + 2]
            tasks.append(lambda lo=lo, mid=mid, hi=hi: _merge_into(src, dst, lo, mid, hi))
            next_runs.append(hi)
            i += 2
        if i + 2 == len(runs):  # odd run: carried to the next level as-is
            lo, hi = runs[i], runs[i + 1]
            tasks.append(lambda lo=lo, hi=hi: np.copyto(dst[lo:hi], src[lo:hi]))
            next_runs.append(hi)
        _run_tasks(tasks, cfg)
        src, dst = dst, src
        runs = next_runs
        if stats is not None:
            stats.merge_levels += 1
    return src


def keyed_payload_sort(keys: np.ndarray, cfg: ForkJoinConfig | None = None
                       ) -> tuple[np.ndarray, np.ndarray]:
    """Stable sort; returns (sorted_keys, permutation).

    Stability comes from sorting (key, original index) pairs.  For
    32-bit keys the pair packs into one 64-bit word and rides the plain
    parallel sort; 64-bit keys fall back to blockwise stable argsorts
    combined by payload-carrying merges.
    """
    cfg = cfg or ForkJoinConfig()
    keys = _check_keys(keys)
    n = len(keys)
    if n == 0:
        return keys.copy(), np.empty(0, dtype=np.intp)
    if keys.dtype == np.uint32:
        packed = (keys.astype(np.uint64) << np.uint64(32)) | np.arange(
            n, dtype=np.uint64
        )
        packed = parallel_sort(packed, cfg)
        perm = (packed & np.uint64(0xFFFF_FFFF)).astype(np.intp)
        return (packed >> np.uint64(32)).astype(np.uint32), perm

    bounds = _block_bounds(n, keys.itemsize * 2, cfg)
    if len(bounds) <= 2:
        perm = np.argsort(keys, kind="stable")
        return keys[perm], perm

    def sort_block(lo: int, hi: int):
        order = np.argsort(keys[lo:hi], kind="stable")
        return keys[lo:hi][order], order.astype(np.intp) + lo

    runs = _run_tasks(
        [lambda lo=lo, hi=hi: sort_block(lo, hi) for lo, hi in zip(bounds, bounds[1:])],
        cfg,
    )

    def merge_pair(left, right):
        (ak, ai), (bk, bi) = left, right
        at = np.searchsorted(ak, bk, side="right") + np.arange(len(bk), dtype=np.intp)
        ok = np.empty(len(ak) + len(bk), dtype=keys.dtype)
        oi = np.empty(len(ak) + len(bk), dtype=np.intp)
        taken = np.zeros(len(ok), dtype=bool)
        taken[at] = True
        ok[at] = bk
        oi[at] = bi
        ok[~taken] = ak
        oi[~taken] = ai
        return ok, oi

    while len(runs) > 1:
        pairs = [(runs[i], runs[i + 1]) for i in range(0, len(runs) - 1, 2)]
        merged = _run_tasks(
            [lambda p=p: merge_pair(p[0], p[1]) for p in pairs], cfg
        )
        if len(runs) % 2:
            merged.append(runs[-1])  # odd run carried
        runs = merged
    return runs[0]


def parallel_merge_join(left: np.ndarray, right: np.ndarray,
                        cfg: ForkJoinConfig | None = None
                        ) -> tuple[np.ndarray, np.ndarray]:
    """All index pairs (i, j) with left[i] == right[j]; inputs sorted.

    Equal-key runs produce their full cross product (bag semantics).
    Workers take disjoint key ranges, so the concatenated result is
    identical for any worker count.  With ``debug`` set, unsorted input
    raises instead of producing garbage.
    """
    cfg = cfg or ForkJoinConfig()
    left = _check_keys(left)
    right = _check_keys(right)
    if cfg.debug:
        for name, arr in (("left", left), ("right", right)):
            if len(arr) > 1 and np.any(arr[1:] < arr[:-1]):
                raise ValueError(f"{name} keys are not sorted")
    if len(left) == 0 or len(right) == 0:
        empty = np.empty(0, dtype=np.intp)
        return empty, empty

    def join_range(l_lo: int, l_hi: int, r_lo: int, r_hi: int):
        lpart = left[l_lo:l_hi]
        rpart = right[r_lo:r_hi]
        start = np.searchsorted(rpart, lpart, side="left")
        end = np.searchsorted(rpart, lpart, side="right")
        counts = end - start
        total = int(counts.sum())
        if total == 0:
            empty = np.empty(0, dtype=np.intp)
            return empty, empty
        lidx = np.repeat(np.arange(len(lpart), dtype=np.intp), counts)
        offsets = np.concatenate(([0], np.cumsum(counts)[:-1]))
        ridx = np.arange(total, dtype=np.intp) - np.repeat(offsets, counts)
        ridx += np.repeat(start, counts)
        return lidx + l_lo, ridx + r_lo

    bounds = _block_bounds(len(left), left.itemsize, cfg)
    if len(bounds) <= 2:
        return join_range(0, len(left), 0, len(right))

    # Snap block cuts to key boundaries so no equal-key run straddles two
    # workers, then mirror the cuts onto the right side.
    cut_keys = [left[b] for b in bounds[1:-1]]
    l_cuts = [0] + [int(np.searchsorted(left, k, side="left")) for k in cut_keys]
    l_cuts.append(len(left))
    r_cuts = [0] + [int(np.searchsorted(right, k, side="left")) for k in cut_keys]
    r_cuts.append(len(right))
    parts = _run_tasks(
        [
            lambda a=a, b=b, c=c, d=d: join_range(a, b, c, d)
            for (a, b), (c, d) in zip(
                zip(l_cuts, l_cuts[1:]), zip(r_cuts, r_cuts[1:])
            )
        ],
        cfg,
    )
    lparts = [p[0] for p in parts]
    rparts = [p[1] for p in parts]
    return np.concatenate(lparts), np.concatenate(rparts)


def _sort_unique_rows(rows: np.ndarray) -> np.ndarray:
    """Lexicographically sort rows (leftmost column primary) and dedup."""
    if len(rows) <= 1:
        return rows.copy()
    order = np.lexsort(tuple(rows[:, c] for c in range(rows.shape[1] - 1, -1, -1)))
    rows = rows[order]
    keep = np.empty(len(rows), dtype=bool)
    keep[0] = True
    keep[1:] = (rows[1:] != rows[:-1]).any(axis=1)
    return rows[keep]


def _merge_unique_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if len(a) == 0:
        return b
    if len(b) == 0:
        return a
    return _sort_unique_rows(np.vstack((a, b)))


def parallel_unique_filter(candidates: np.ndarray, index,
                           cfg: ForkJoinConfig | None = None) -> np.ndarray:
    """Deduplicate candidate fact rows and drop those already indexed.

    Blocks are sorted and deduplicated independently, merge levels
    combine them, and a final merge against the already-stored facts of
    the affected fact types filters out known rows.  Output rows come
    back lexicographically sorted, so the result is deterministic for
    any blocking.
    """
    cfg = cfg or ForkJoinConfig()
    candidates = np.ascontiguousarray(candidates, dtype=np.uint64)
    if candidates.ndim != 2 or (len(candidates) and candidates.shape[1] != 5):
        raise TypeError("candidates must be an (n, 5) fact array")
    if len(candidates) == 0:
        return candidates.reshape(0, 5)

    row_bytes = candidates.itemsize * 5
    bounds = _block_bounds(len(candidates), row_bytes, cfg)
    runs = _run_tasks(
        [
            lambda lo=lo, hi=hi: _sort_unique_rows(candidates[lo:hi])
            for lo, hi in zip(bounds, bounds[1:])
        ],
        cfg,
    )
    while len(runs) > 1:
        pairs = [(runs[i], runs[i + 1]) for i in range(0, len(runs) - 1, 2)]
        merged = _run_tasks(
            [lambda p=p: _merge_unique_rows(p[0], p[1]) for p in pairs], cfg
        )
        if len(runs) % 2:
            merged.append(runs[-1])
        runs = merged
    unique = runs[0]

    types = np.unique(unique[:, 0])
    existing_parts = [index.facts_of_type(int(t)) for t in types]
    existing_parts = [p for p in existing_parts if len(p)]
    if not existing_parts:
        return unique
    existing = np.vstack(existing_parts)

    # Stack known facts above the candidates and sort; a candidate row
    # survives only when the row before it differs, which removes exact
    # matches with stored facts in one pass.
    stacked = np.vstack((existing, unique))
    flags = np.zeros(len(stacked), dtype=np.uint64)
    flags[len(existing):] = 1
    keys = [flags] + [stacked[:, c] for c in range(4, -1, -1)]
    order = np.lexsort(tuple(keys))
    stacked = stacked[order]
    flags = flags[order]
    fresh = np.empty(len(stacked), dtype=bool)
    fresh[0] = True
    fresh[1:] = (stacked[1:] != stacked[:-1]).any(axis=1)
    return stacked[fresh & (flags == 1)]  # already in sorted row order
