"""
Fork-join building blocks
=========================

Sorts, joins, and duplicate filtering all follow one pattern: cut the
input into worker-owned blocks, work locally, then merge pairwise.
Results are bit-identical for any worker count, which is what makes
the higher layers testable.
"""

import time

import numpy as np

from hiperfact import (
    Fact,
    ForkJoinConfig,
    Rank1Index,
    StringDictionary,
    keyed_payload_sort,
    parallel_merge_join,
    parallel_sort,
    parallel_unique_filter,
)

rng = np.random.default_rng(7)
keys = rng.integers(0, 2**32, size=2_000_000, dtype=np.uint64).astype(np.uint32)

for workers in (1, 2, 8):
    cfg = ForkJoinConfig(worker_count=workers, block_size=1 << 20)
    t0 = time.perf_counter()
    out = parallel_sort(keys, cfg)
    dt = (time.perf_counter() - t0) * 1000
    ok = bool(np.array_equal(out, np.sort(keys)))
    print(f"sort 2M keys, {workers} worker(s): {dt:6.1f} ms, correct={ok}")

# The payload variant keeps track of where each key came from, so a
# sorted permutation can gather whole fact rows afterwards.
small = rng.integers(0, 50, size=10, dtype=np.uint32)
sorted_keys, perm = keyed_payload_sort(small)
print("keys:     ", small.tolist())
print("sorted:   ", sorted_keys.tolist())
print("gathered: ", small[perm].tolist())

# Merge join over two sorted key columns: every equal pair comes back
# as an index pair, duplicates included.
left = np.array([2, 2, 5, 7, 7, 7], dtype=np.uint32)
right = np.array([2, 7, 7, 9], dtype=np.uint32)
li, ri = parallel_merge_join(left, right)
print("join pairs:", list(zip(li.tolist(), ri.tolist())))

# Unique filtering keeps inference idempotent: candidate fact rows are
# deduplicated and checked against what the index already holds.
d = StringDictionary()
T = d.intern("T")
idx = Rank1Index(d)
idx.insert_fact(Fact(T, 1, 1, 2, 10))
candidates = np.array(
    [[T, 1, 1, 2, 10], [T, 1, 1, 2, 11], [T, 1, 1, 2, 11], [T, 2, 1, 2, 10]],
    dtype=np.uint64,
)
fresh = parallel_unique_filter(candidates, idx)
print(f"{len(candidates)} candidates -> {len(fresh)} genuinely new rows")
