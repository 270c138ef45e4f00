"""Binding tables and join operators over rank-1 lookup results.

A lookup returns matching facts as an (n, 5) uint64 array.  Rule
evaluation turns those into binding tables: one column per variable,
one row per proto match.  Tables stay bags (duplicates allowed) until
:meth:`JoinResult.materialize`, which deduplicates and sorts.

Two physical layouts are supported.  Row-major ("rr") keeps a single
(n, k) array, so taking a row subset is one gather; column-major ("cr")
keeps one contiguous 1-d array per variable, which the sort and merge
primitives prefer.  Both expose the same logical interface and must
produce identical results.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .forkjoin import ForkJoinConfig, keyed_payload_sort, parallel_merge_join
from .index import COL_ATTR, COL_ID, COL_VBITS
from .model import (
    HANDLE_KIND,
    CompareOp,
    Condition,
    PlanningError,
    ValueType,
    Variable,
    VariableJoinTest,
    slot_kind,
)
from .strings import StringDictionary

LAYOUTS = ("rr", "cr")
JOIN_METHODS = ("hj", "mj")

_POS_COLUMN = {0: COL_ID, 1: COL_ATTR, 2: COL_VBITS}


@dataclass(frozen=True)
class JoinOptions:
    """Knobs threaded through every join during one rule evaluation."""

    method: str = "hj"
    layout: str = "rr"
    fork: ForkJoinConfig = field(default_factory=ForkJoinConfig)

    def __post_init__(self):
        if self.method not in JOIN_METHODS:
            raise ValueError(f"unknown join method {self.method!r}")
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown result layout {self.layout!r}")


class JoinResult:
    """Bag of variable bindings with a fixed column schema.

    ``kinds[i]`` is either :data:`HANDLE_KIND` or a concrete
    :class:`ValueType`; it decides which joins and comparisons are legal
    for column ``i``.
    """

    __slots__ = ("vars", "kinds", "layout", "_rows", "_cols")

    def __init__(self, vars, kinds, layout, rows=None, cols=None):
        self.vars: tuple[str, ...] = tuple(vars)
        self.kinds: tuple = tuple(kinds)
        self.layout = layout
        self._rows = rows
        self._cols = cols
        if layout == "rr":
            assert rows is not None and rows.shape[1] == len(self.vars)
        else:
            assert cols is not None and len(cols) == len(self.vars)

    @classmethod
    def from_columns(cls, vars, kinds, columns: Sequence[np.ndarray], layout: str):
        columns = [np.ascontiguousarray(c, dtype=np.uint64) for c in columns]
        if layout == "rr":
            n = len(columns[0]) if columns else 0
            rows = np.empty((n, len(columns)), dtype=np.uint64)
            for i, c in enumerate(columns):
                rows[:, i] = c
            return cls(vars, kinds, "rr", rows=rows)
        return cls(vars, kinds, "cr", cols=columns)

    @classmethod
    def empty(cls, vars, kinds, layout: str):
        return cls.from_columns(
            vars, kinds, [np.empty(0, dtype=np.uint64) for _ in vars], layout
        )

    def __len__(self) -> int:
        if self.layout == "rr":
            return self._rows.shape[0]
        return len(self._cols[0]) if self._cols else 0

    @property
    def width(self) -> int:
        return len(self.vars)

    def index_of(self, var: str) -> int:
        try:
            return self.vars.index(var)
        except ValueError:
            raise KeyError(f"no column for variable ?{var}") from None

    def kind_of(self, var: str):
        return self.kinds[self.index_of(var)]

    def column(self, var: str) -> np.ndarray:
        """Contiguous uint64 column for one variable."""
        i = self.index_of(var)
        if self.layout == "cr":
            return self._cols[i]
        return np.ascontiguousarray(self._rows[:, i])

    def rows(self) -> np.ndarray:
        """(n, k) uint64 view of the whole table (copies under cr)."""
        if self.layout == "rr":
            return self._rows
        n = len(self)
        out = np.empty((n, self.width), dtype=np.uint64)
        for i, c in enumerate(self._cols):
            out[:, i] = c
        return out

    def take(self, idx: np.ndarray) -> "JoinResult":
        if self.layout == "rr":
            return JoinResult(self.vars, self.kinds, "rr", rows=self._rows[idx])
        return JoinResult(
            self.vars, self.kinds, "cr", cols=[c[idx] for c in self._cols]
        )

    def select(self, mask: np.ndarray) -> "JoinResult":
        return self.take(np.nonzero(mask)[0])

    def project(self, keep: Sequence[str]) -> "JoinResult":
        idx = [self.index_of(v) for v in keep]
        kinds = [self.kinds[i] for i in idx]
        if self.layout == "rr":
            return JoinResult(keep, kinds, "rr", rows=self._rows[:, idx])
        return JoinResult(keep, kinds, "cr", cols=[self._cols[i] for i in idx])

    def materialize(self) -> np.ndarray:
        """Distinct binding rows in ascending lexicographic order."""
        rows = self.rows()
        if rows.shape[0] == 0:
            return rows.copy()
        return np.unique(rows, axis=0)


def result_from_facts(cond: Condition, facts: np.ndarray, layout: str) -> JoinResult:
    """Binding table for one condition's lookup result.

    Repeated variables inside the condition become an equality filter,
    and the duplicate column is dropped.
    """
    seen: dict[str, int] = {}
    vars: list[str] = []
    kinds: list = []
    source_cols: list[int] = []
    mask = None
    for pos, var in cond.variables():
        kind = slot_kind(pos, cond.value_type)
        col = _POS_COLUMN[pos]
        if var.name in seen:
            prior = seen[var.name]
            if kinds[prior] != kind:
                raise PlanningError(
                    f"variable ?{var.name} is bound at slots of different "
                    f"value kinds within one condition"
                )
            eq = facts[:, source_cols[prior]] == facts[:, col]
            mask = eq if mask is None else (mask & eq)
            continue
        seen[var.name] = len(vars)
        vars.append(var.name)
        kinds.append(kind)
        source_cols.append(col)
    if mask is not None:
        facts = facts[mask]
    cols = [facts[:, c] for c in source_cols]
    return JoinResult.from_columns(vars, kinds, cols, layout)


def _equality_pairs_hashed(
    build: np.ndarray, probe: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """All (build_row, probe_row) index pairs with equal keys.

    The build side is turned into an equality lookup structure (sorted
    distinct keys plus group extents); the probe side streams through it.
    """
    if len(build) == 0 or len(probe) == 0:
        z = np.empty(0, dtype=np.int64)
        return z, z
    order = np.argsort(build, kind="stable")
    sb = build[order]
    uniq, starts = np.unique(sb, return_index=True)
    counts = np.diff(np.append(starts, len(sb)))
    pos = np.searchsorted(uniq, probe)
    clipped = np.minimum(pos, len(uniq) - 1)
    hit = uniq[clipped] == probe
    probe_rows = np.nonzero(hit)[0]
    groups = pos[probe_rows]
    reps = counts[groups]
    total = int(reps.sum())
    probe_exp = np.repeat(probe_rows, reps)
    bases = np.repeat(starts[groups], reps)
    within = np.arange(total, dtype=np.int64) - np.repeat(
        np.cumsum(reps) - reps, reps
    )
    build_exp = order[bases + within]
    return build_exp.astype(np.int64), probe_exp.astype(np.int64)


def _pairs_hj(lk: np.ndarray, rk: np.ndarray, fork: ForkJoinConfig):
    # build on the smaller input, probe with the larger
    if len(lk) <= len(rk):
        b, p = _equality_pairs_hashed(lk, rk)
        return b, p
    b, p = _equality_pairs_hashed(rk, lk)
    return p, b


def _pairs_mj(lk: np.ndarray, rk: np.ndarray, fork: ForkJoinConfig):
    skl, pl = keyed_payload_sort(np.ascontiguousarray(lk), fork)
    skr, pr = keyed_payload_sort(np.ascontiguousarray(rk), fork)
    li, ri = parallel_merge_join(skl, skr, fork)
    return pl[li].astype(np.int64), pr[ri].astype(np.int64)


def _merged_schema(left: JoinResult, right: JoinResult):
    vars = list(left.vars)
    kinds = list(left.kinds)
    extra = []
    for i, v in enumerate(right.vars):
        if v in left.vars:
            if left.kind_of(v) != right.kinds[i]:
                raise PlanningError(
                    f"variable ?{v} joins slots of different value types "
                    f"({_kind_name(left.kind_of(v))} vs {_kind_name(right.kinds[i])})"
                )
            continue
        vars.append(v)
        kinds.append(right.kinds[i])
        extra.append(v)
    return vars, kinds, extra


def _kind_name(kind) -> str:
    if kind == HANDLE_KIND:
        return "handle"
    return kind.type_name


def _gather(left, right, li, ri, extra, options):
    vars, kinds, _ = _merged_schema(left, right)
    lt = left.take(li)
    cols = [lt.column(v) for v in left.vars]
    rt = right.take(ri)
    cols.extend(rt.column(v) for v in extra)
    return JoinResult.from_columns(vars, kinds, cols, options.layout)


def cross_join(left: JoinResult, right: JoinResult, options: JoinOptions) -> JoinResult:
    """Cartesian product; used only when condition groups share no variable."""
    nl, nr = len(left), len(right)
    li = np.repeat(np.arange(nl, dtype=np.int64), nr)
    ri = np.tile(np.arange(nr, dtype=np.int64), nl)
    _, _, extra = _merged_schema(left, right)
    return _gather(left, right, li, ri, extra, options)


def join(
    left: JoinResult,
    right: JoinResult,
    options: JoinOptions,
    on: str | None = None,
) -> JoinResult:
    """Equality join on one primary variable.

    Any further variables shared by both sides turn into equality
    filters on the matched pairs.  The primary defaults to the first
    shared variable in the left schema's order.
    """
    shared = [v for v in left.vars if v in right.vars]
    vars, kinds, extra = _merged_schema(left, right)  # validates kinds
    if not shared:
        return cross_join(left, right, options)
    if on is None:
        on = shared[0]
    elif on not in shared:
        raise PlanningError(f"join variable ?{on} is not shared by both sides")

    lk = left.column(on)
    rk = right.column(on)
    pairs = _pairs_hj if options.method == "hj" else _pairs_mj
    li, ri = pairs(lk, rk, options.fork)

    for v in shared:
        if v == on:
            continue
        keep = left.column(v)[li] == right.column(v)[ri]
        li = li[keep]
        ri = ri[keep]
    return _gather(left, right, li, ri, extra, options)


# --- comparison tests -------------------------------------------------

# decode categories: signed/unsigned-fitting ints, uint64, floats, handles
_INT64_KINDS = (ValueType.INT32, ValueType.INT64, ValueType.UINT32, ValueType.BOOL)


def _decode_column(col: np.ndarray, kind):
    if kind == HANDLE_KIND:
        return col, "s"
    if kind in _INT64_KINDS:
        if kind is ValueType.INT32:
            return col.astype(np.uint32).view(np.int32).astype(np.int64), "i"
        if kind is ValueType.INT64:
            return col.view(np.int64), "i"
        return col.astype(np.int64), "i"
    if kind is ValueType.UINT64:
        return col, "u"
    if kind is ValueType.FLOAT:
        return col.astype(np.uint32).view(np.float32).astype(np.float64), "f"
    return col.view(np.float64), "f"


_OP_FUNCS = {
    CompareOp.EQ: np.equal,
    CompareOp.NE: np.not_equal,
    CompareOp.LT: np.less,
    CompareOp.LE: np.less_equal,
    CompareOp.GT: np.greater,
    CompareOp.GE: np.greater_equal,
}


def _compare_signed_uint64(sv, uv, op: CompareOp) -> np.ndarray:
    # int64 vs uint64 would silently upcast to float64; split on sign instead
    neg = sv < 0
    if op in (CompareOp.LT, CompareOp.LE, CompareOp.NE):
        neg_result = True
    else:
        neg_result = False
    out = np.full(len(sv), neg_result, dtype=bool)
    nn = ~neg
    out[nn] = _OP_FUNCS[op](sv[nn].astype(np.uint64), uv[nn])
    return out


def evaluate_test(result: JoinResult, test: VariableJoinTest, dictionary: StringDictionary) -> np.ndarray:
    """Row mask for one two-variable comparison over bound columns."""
    lkind = result.kind_of(test.left.name)
    rkind = result.kind_of(test.right.name)
    if (lkind == HANDLE_KIND) != (rkind == HANDLE_KIND):
        raise PlanningError(
            f"test compares ?{test.left.name} ({_kind_name(lkind)}) with "
            f"?{test.right.name} ({_kind_name(rkind)})"
        )
    lv, lc = _decode_column(result.column(test.left.name), lkind)
    rv, rc = _decode_column(result.column(test.right.name), rkind)
    op = _OP_FUNCS[test.op]
    if lc == "s":
        if test.op in (CompareOp.EQ, CompareOp.NE):
            return op(lv, rv)
        # ordering on strings is defined by the text, not by handles
        ls = np.array([dictionary.resolve(int(h)) for h in lv], dtype=object)
        rs = np.array([dictionary.resolve(int(h)) for h in rv], dtype=object)
        return op(ls, rs)
    if lc == "i" and rc == "u":
        return _compare_signed_uint64(lv, rv, test.op)
    if lc == "u" and rc == "i":
        flipped = {
            CompareOp.LT: CompareOp.GT,
            CompareOp.LE: CompareOp.GE,
            CompareOp.GT: CompareOp.LT,
            CompareOp.GE: CompareOp.LE,
        }
        return _compare_signed_uint64(rv, lv, flipped.get(test.op, test.op))
    return op(lv, rv)


def apply_tests(
    result: JoinResult,
    tests: Iterable[VariableJoinTest],
    dictionary: StringDictionary,
) -> JoinResult:
    """Filter by every test whose variables are both bound here."""
    mask = None
    for t in tests:
        m = evaluate_test(result, t, dictionary)
        mask = m if mask is None else (mask & m)
    if mask is None:
        return result
    return result.select(mask)


def tests_ready(result_vars: Sequence[str], test: VariableJoinTest) -> bool:
    return test.left.name in result_vars and test.right.name in result_vars
