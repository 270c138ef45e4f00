"""Rank-1 inverted indices over fact quintuples.

Every fact is indexed three times, once per triple component (id, attr,
value).  Lookup keys always include the fact type; the value-component
key additionally includes the value type.  The indexed component is not
stored again in the bucket: buckets hold residual rows and the component
is reconstructed from the key when a lookup materializes facts.

Four interchangeable backends implement the same contract:

``hi``
    Two-level hash: fact type -> component key -> growable bucket.
``ai``
    Tight array by fact-type ordinal, then a direct-address array
    indexed by dictionary handle.  Numeric value keys, which are not
    handles, fall back to a hash map.
``lpim``
    Buckets are chains of fixed-size pages drawn from one pre-allocated
    arena with a free list (pages return to the pool on release).
``lpid``
    Same page chains, but pages are allocated on demand.

Lookups: ``r1l`` fetches the single concrete component of a rank-1
condition; ``rnl`` fetches the concrete component with the smallest
key-level count and filters the remaining concrete components; ``rl``
dispatches on the condition rank and falls back to a full fact-type scan
at rank 0.  Results are (n, 5) uint64 arrays in column order
(fact_type, id, attr, value_type, value), filtered to the condition's
declared value type.  Key-level counts themselves are not value-type
filtered, so the min-count estimate is an upper bound on the true
result size.
"""

from __future__ import annotations

import math
from typing import Iterable, Iterator

import numpy as np

from .model import (
    Condition,
    Fact,
    POS_ATTR,
    POS_ID,
    POS_VALUE,
    Variable,
    condition_rank,
)
from .strings import StringDictionary

COL_TYPE, COL_ID, COL_ATTR, COL_VTAG, COL_VBITS = range(5)

# Residual widths: id/attr buckets keep (other-handle, value_type, value),
# value buckets keep (id, attr).
_RES_W = 3
_VAL_RES_W = 2

PAGE_ROWS = 1024
POOL_PAGES = 4096

_STRING_TAG = 0  # ValueType.STRING; value handles are direct-addressable


def _empty_result() -> np.ndarray:
    return np.empty((0, 5), dtype=np.uint64)


# ---------------------------------------------------------------------------
# Buckets
# ---------------------------------------------------------------------------


class ListBucket:
    """Growable tight array of residual rows (hash/array backends)."""

    __slots__ = ("items",)

    def __init__(self, width: int, allocator=None):
        self.items: list[tuple[int, ...]] = []

    def __len__(self) -> int:
        return len(self.items)

    def append(self, row: tuple[int, ...]) -> None:
        self.items.append(row)

    def contains(self, row: tuple[int, ...]) -> bool:
        return row in self.items

    def remove(self, row: tuple[int, ...]) -> bool:
        """Swap-delete: the last row fills the hole."""
        try:
            i = self.items.index(row)
        except ValueError:
            return False
        last = self.items.pop()
        if i < len(self.items):
            self.items[i] = last
        return True

    def rows(self) -> np.ndarray:
        if not self.items:
            return np.empty((0, _RES_W), dtype=np.uint64)
        return np.array(self.items, dtype=np.uint64)


class PagePool:
    """Arena of fixed-size pages with a free list.

    The arena is reserved up front as one block and sliced into page
    views; capacity doubles by reserving another block of the current
    total size.  Untouched reserve costs only address space.
    """

    __slots__ = ("_blocks", "_free", "pages_total")

    def __init__(self, pages: int = POOL_PAGES):
        self._blocks: list[np.ndarray] = []
        self._free: list[np.ndarray] = []
        self.pages_total = 0
        self._reserve(pages)

    def _reserve(self, pages: int) -> None:
        block = np.empty((pages * PAGE_ROWS, _RES_W), dtype=np.uint64)
        self._blocks.append(block)
        for i in range(pages):
            self._free.append(block[i * PAGE_ROWS:(i + 1) * PAGE_ROWS])
        self.pages_total += pages

    def allocate(self) -> np.ndarray:
        if not self._free:
            self._reserve(self.pages_total)  # double
        return self._free.pop()

    def release(self, page: np.ndarray) -> None:
        self._free.append(page)

    @property
    def pages_free(self) -> int:
        return len(self._free)


class _DemandAllocator:
    """Page source for the on-demand backend: plain allocations."""

    __slots__ = ()

    def allocate(self) -> np.ndarray:
        return np.empty((PAGE_ROWS, _RES_W), dtype=np.uint64)

    def release(self, page: np.ndarray) -> None:
        pass


class PageChain:
    """Bucket stored as a chain of pages with per-page fill counts."""

    __slots__ = ("allocator", "width", "pages", "fills", "n")

    def __init__(self, width: int, allocator):
        self.allocator = allocator
        self.width = width
        self.pages: list[np.ndarray] = []
        self.fills: list[int] = []
        self.n = 0

    def __len__(self) -> int:
        return self.n

    def append(self, row: tuple[int, ...]) -> None:
        if not self.pages or self.fills[-1] == PAGE_ROWS:
            self.pages.append(self.allocator.allocate())
            self.fills.append(0)
        fill = self.fills[-1]
        page = self.pages[-1]
        for j, v in enumerate(row):
            page[fill, j] = v
        self.fills[-1] = fill + 1
        self.n += 1

    def _locate(self, row: tuple[int, ...]) -> tuple[int, int] | None:
        target = np.array(row, dtype=np.uint64)
        w = self.width
        for pi, (page, fill) in enumerate(zip(self.pages, self.fills)):
            hits = np.nonzero((page[:fill, :w] == target).all(axis=1))[0]
            if len(hits):
                return pi, int(hits[0])
        return None

    def contains(self, row: tuple[int, ...]) -> bool:
        return self._locate(row) is not None

    def remove(self, row: tuple[int, ...]) -> bool:
        loc = self._locate(row)
        if loc is None:
            return False
        pi, ri = loc
        last_pi = len(self.pages) - 1
        last_ri = self.fills[last_pi] - 1
        self.pages[pi][ri, : self.width] = self.pages[last_pi][last_ri, : self.width]
        self.fills[last_pi] = last_ri
        if last_ri == 0:
            self.allocator.release(self.pages.pop())
            self.fills.pop()
        self.n -= 1
        return True

    def rows(self) -> np.ndarray:
        if self.n == 0:
            return np.empty((0, self.width), dtype=np.uint64)
        parts = [
            page[:fill, : self.width] for page, fill in zip(self.pages, self.fills)
        ]
        return parts[0].copy() if len(parts) == 1 else np.vstack(parts)


# ---------------------------------------------------------------------------
# Component maps (fact type x key -> bucket)
# ---------------------------------------------------------------------------


class HashComponentMap:
    """Two-level dict; keys are handles or (value_type, value) tuples."""

    __slots__ = ("level1",)

    def __init__(self, dictionary=None):
        self.level1: dict[int, dict] = {}

    def get(self, fact_type: int, key):
        level2 = self.level1.get(fact_type)
        if level2 is None:
            return None
        return level2.get(key)

    def ensure(self, fact_type: int, key, factory):
        level2 = self.level1.get(fact_type)
        if level2 is None:
            level2 = {}
            self.level1[fact_type] = level2
        bucket = level2.get(key)
        if bucket is None:
            bucket = factory()
            level2[key] = bucket
        return bucket

    def items_of_type(self, fact_type: int) -> Iterable[tuple[object, object]]:
        level2 = self.level1.get(fact_type)
        return level2.items() if level2 else ()

    def fact_types(self) -> Iterable[int]:
        return self.level1.keys()


class ArrayComponentMap:
    """Fact-type ordinal array over direct-address handle arrays.

    Second-level arrays start small and double until they cover the
    handle, mirroring growth toward the dictionary high watermark.
    """

    __slots__ = ("ordinals", "tables", "types")

    def __init__(self, dictionary=None):
        self.ordinals: dict[int, int] = {}
        self.tables: list[list] = []
        self.types: list[int] = []

    def _table(self, fact_type: int, create: bool):
        ordinal = self.ordinals.get(fact_type)
        if ordinal is None:
            if not create:
                return None
            ordinal = len(self.tables)
            self.ordinals[fact_type] = ordinal
            self.tables.append([])
            self.types.append(fact_type)
        return self.tables[ordinal]

    @staticmethod
    def _grow(table: list, handle: int) -> None:
        need = handle + 1
        size = max(len(table), 8)
        while size < need:
            size *= 2
        table.extend([None] * (size - len(table)))

    def get(self, fact_type: int, key: int):
        table = self._table(fact_type, create=False)
        if table is None or key >= len(table):
            return None
        return table[key]

    def ensure(self, fact_type: int, key: int, factory):
        table = self._table(fact_type, create=True)
        if key >= len(table):
            self._grow(table, key)
        bucket = table[key]
        if bucket is None:
            bucket = factory()
            table[key] = bucket
        return bucket

    def items_of_type(self, fact_type: int) -> Iterator[tuple[int, object]]:
        table = self._table(fact_type, create=False)
        if table is None:
            return
        for handle, bucket in enumerate(table):
            if bucket is not None:
                yield handle, bucket

    def fact_types(self) -> Iterable[int]:
        return self.types


class ArrayValueMap:
    """Value-component map for the array backend.

    String values are dictionary handles and live in direct-address
    arrays; other value types cannot be direct-addressed (arbitrary
    64-bit patterns) and fall back to a hash map.
    """

    __slots__ = ("strings", "others")

    def __init__(self, dictionary=None):
        self.strings = ArrayComponentMap()
        self.others = HashComponentMap()

    def get(self, fact_type: int, key):
        vtag, vbits = key
        if vtag == _STRING_TAG:
            return self.strings.get(fact_type, vbits)
        return self.others.get(fact_type, key)

    def ensure(self, fact_type: int, key, factory):
        vtag, vbits = key
        if vtag == _STRING_TAG:
            return self.strings.ensure(fact_type, vbits, factory)
        return self.others.ensure(fact_type, key, factory)


# ---------------------------------------------------------------------------
# The index proper
# ---------------------------------------------------------------------------

_POS_ORDER = (POS_ID, POS_ATTR, POS_VALUE)  # tie-break order everywhere


class Rank1Index:
    """Triple-component inverted index with rank-driven lookups."""

    def __init__(self, dictionary: StringDictionary, *, backend: str = "hi",
                 pool_pages: int = POOL_PAGES):
        self.dictionary = dictionary
        self.backend = backend
        self.size = 0
        self.lookups = 0  # public lookup calls; laziness tests read this
        if backend == "hi":
            make_map = HashComponentMap
            make_val_map = HashComponentMap
            self._bucket = ListBucket
            self._allocator = None
        elif backend == "ai":
            make_map = ArrayComponentMap
            make_val_map = ArrayValueMap
            self._bucket = ListBucket
            self._allocator = None
        elif backend == "lpim":
            make_map = HashComponentMap
            make_val_map = HashComponentMap
            self._bucket = PageChain
            self._allocator = PagePool(pool_pages)
        elif backend == "lpid":
            make_map = HashComponentMap
            make_val_map = HashComponentMap
            self._bucket = PageChain
            self._allocator = _DemandAllocator()
        else:
            raise ValueError(f"unknown index backend {backend!r}")
        self._id_map = make_map(dictionary)
        self._attr_map = make_map(dictionary)
        self._val_map = make_val_map(dictionary)

    # -- write path ---------------------------------------------------------

    def _new_bucket(self, width: int):
        return self._bucket(width, self._allocator)

    def insert_fact(self, fact: Fact) -> bool:
        """Index a fact under all three components; False if present."""
        id_res = (fact.attr, fact.value_type, fact.value)
        id_bucket = self._id_map.ensure(
            fact.fact_type, fact.id, lambda: self._new_bucket(_RES_W)
        )
        if id_bucket.contains(id_res):
            return False
        id_bucket.append(id_res)
        attr_bucket = self._attr_map.ensure(
            fact.fact_type, fact.attr, lambda: self._new_bucket(_RES_W)
        )
        attr_bucket.append((fact.id, fact.value_type, fact.value))
        val_bucket = self._val_map.ensure(
            fact.fact_type,
            (fact.value_type, fact.value),
            lambda: self._new_bucket(_VAL_RES_W),
        )
        val_bucket.append((fact.id, fact.attr))
        self.size += 1
        return True

    def delete_fact(self, fact: Fact) -> bool:
        id_bucket = self._id_map.get(fact.fact_type, fact.id)
        if id_bucket is None or not id_bucket.remove(
            (fact.attr, fact.value_type, fact.value)
        ):
            return False
        attr_bucket = self._attr_map.get(fact.fact_type, fact.attr)
        attr_bucket.remove((fact.id, fact.value_type, fact.value))
        val_bucket = self._val_map.get(fact.fact_type, (fact.value_type, fact.value))
        val_bucket.remove((fact.id, fact.attr))
        self.size -= 1
        return True

    def contains(self, fact: Fact) -> bool:
        bucket = self._id_map.get(fact.fact_type, fact.id)
        return bucket is not None and bucket.contains(
            (fact.attr, fact.value_type, fact.value)
        )

    # -- statistics ---------------------------------------------------------

    def component_counts(self, cond: Condition) -> dict[int, int]:
        """Key-level bucket sizes for each concrete component position."""
        counts: dict[int, int] = {}
        if not isinstance(cond.id, Variable):
            bucket = self._id_map.get(cond.fact_type, cond.id)
            counts[POS_ID] = len(bucket) if bucket else 0
        if not isinstance(cond.attr, Variable):
            bucket = self._attr_map.get(cond.fact_type, cond.attr)
            counts[POS_ATTR] = len(bucket) if bucket else 0
        if not isinstance(cond.value, Variable):
            bucket = self._val_map.get(
                cond.fact_type, (int(cond.value_type), cond.value)
            )
            counts[POS_VALUE] = len(bucket) if bucket else 0
        return counts

    def condition_cardinality(self, cond: Condition) -> float:
        """Min key-level count over concrete components; +inf at rank 0."""
        counts = self.component_counts(cond)
        if not counts:
            return math.inf
        return min(counts.values())

    # -- lookups ------------------------------------------------------------

    def r1l(self, cond: Condition) -> np.ndarray:
        """Single-component fetch for rank-1 conditions; empty otherwise."""
        self.lookups += 1
        if condition_rank(cond) != 1:
            return _empty_result()
        for pos in _POS_ORDER:
            if not isinstance(cond.term(pos), Variable):
                return self._fetch(cond, pos)
        return _empty_result()

    def rnl(self, cond: Condition) -> np.ndarray:
        """Rank-n lookup: fetch the cheapest component, filter the rest."""
        self.lookups += 1
        rank = condition_rank(cond)
        if rank < 1:
            return _empty_result()
        return self._rnl(cond)

    def rl(self, cond: Condition) -> np.ndarray:
        """Rank-dispatched lookup; rank 0 scans the whole fact type."""
        self.lookups += 1
        rank = condition_rank(cond)
        if rank == 0:
            return self._type_scan(cond)
        if rank == 1:
            for pos in _POS_ORDER:
                if not isinstance(cond.term(pos), Variable):
                    return self._fetch(cond, pos)
        return self._rnl(cond)

    def _rnl(self, cond: Condition) -> np.ndarray:
        counts = self.component_counts(cond)
        ccar = min(counts.values())
        fetch_pos = next(p for p in _POS_ORDER if counts.get(p) == ccar)
        facts = self._fetch(cond, fetch_pos)
        if len(facts) == 0:
            return facts
        mask = None
        for pos, col in ((POS_ID, COL_ID), (POS_ATTR, COL_ATTR), (POS_VALUE, COL_VBITS)):
            if pos == fetch_pos:
                continue
            term = cond.term(pos)
            if isinstance(term, Variable):
                continue
            m = facts[:, col] == np.uint64(term)
            mask = m if mask is None else (mask & m)
        return facts if mask is None else facts[mask]

    def _fetch(self, cond: Condition, pos: int) -> np.ndarray:
        """Materialize one component bucket, filtered to the value type."""
        vt = int(cond.value_type)
        if pos == POS_VALUE:
            bucket = self._val_map.get(cond.fact_type, (vt, cond.value))
            if bucket is None or len(bucket) == 0:
                return _empty_result()
            rows = bucket.rows()  # (n, 2): id, attr
            out = np.empty((len(rows), 5), dtype=np.uint64)
            out[:, COL_TYPE] = cond.fact_type
            out[:, COL_ID] = rows[:, 0]
            out[:, COL_ATTR] = rows[:, 1]
            out[:, COL_VTAG] = vt
            out[:, COL_VBITS] = cond.value
            return out
        comp_map = self._id_map if pos == POS_ID else self._attr_map
        bucket = comp_map.get(cond.fact_type, cond.term(pos))
        if bucket is None or len(bucket) == 0:
            return _empty_result()
        rows = bucket.rows()  # (n, 3): other-handle, value_type, value
        rows = rows[rows[:, 1] == np.uint64(vt)]
        out = np.empty((len(rows), 5), dtype=np.uint64)
        out[:, COL_TYPE] = cond.fact_type
        if pos == POS_ID:
            out[:, COL_ID] = cond.id
            out[:, COL_ATTR] = rows[:, 0]
        else:
            out[:, COL_ATTR] = cond.attr
            out[:, COL_ID] = rows[:, 0]
        out[:, COL_VTAG] = rows[:, 1]
        out[:, COL_VBITS] = rows[:, 2]
        return out

    def _type_scan(self, cond: Condition) -> np.ndarray:
        facts = self.facts_of_type(cond.fact_type)
        if len(facts) == 0:
            return facts
        return facts[facts[:, COL_VTAG] == np.uint64(int(cond.value_type))]

    # -- enumeration --------------------------------------------------------

    def fact_types(self) -> list[int]:
        return list(self._id_map.fact_types())

    def facts_of_type(self, fact_type: int) -> np.ndarray:
        parts = []
        for id_handle, bucket in self._id_map.items_of_type(fact_type):
            rows = bucket.rows()
            if len(rows) == 0:
                continue
            out = np.empty((len(rows), 5), dtype=np.uint64)
            out[:, COL_TYPE] = fact_type
            out[:, COL_ID] = id_handle
            out[:, COL_ATTR] = rows[:, 0]
            out[:, COL_VTAG] = rows[:, 1]
            out[:, COL_VBITS] = rows[:, 2]
            parts.append(out)
        if not parts:
            return _empty_result()
        return parts[0] if len(parts) == 1 else np.vstack(parts)

    def all_facts(self) -> np.ndarray:
        parts = [self.facts_of_type(ft) for ft in self.fact_types()]
        parts = [p for p in parts if len(p)]
        if not parts:
            return _empty_result()
        return np.vstack(parts)


BACKENDS = ("hi", "ai", "lpim", "lpid")


def make_index(backend: str, dictionary: StringDictionary, **kwargs) -> Rank1Index:
    return Rank1Index(dictionary, backend=backend, **kwargs)
