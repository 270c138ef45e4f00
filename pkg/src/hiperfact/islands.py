"""Cost-ordered rule evaluation.

Conditions sharing an id-position variable form an island; each island
gets a cost (sum of member cardinalities) and islands are chained in an
order that keeps intermediate join results small.  Within an island,
members are ordered by a packed 32-bit sort key; across islands, the
condition carrying the linking variable is pulled to the front of its
island and joined at the linking position.

Planning is separated from execution so tests can inject pinned
cardinalities: anything with a ``component_counts(condition)`` method
works as a statistics source, the live index being the default.
"""

from __future__ import annotations

import dataclasses
import math
import warnings
from bisect import bisect_left
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .index import Rank1Index
from .joins import (
    JoinOptions,
    JoinResult,
    apply_tests,
    join,
    result_from_facts,
)
from .model import (
    POS_ID,
    Condition,
    Rule,
    Variable,
    condition_rank,
)

CONN_BITS = 9
SCORE_BITS = 11
RANK_BITS = 2
CARD_BITS = 10

_SCORE_SHIFT = RANK_BITS + CARD_BITS
_CONN_SHIFT = SCORE_BITS + _SCORE_SHIFT

START_MULT = 0.05

RNL_MODES = ("ar", "dr")


class CrossProductWarning(UserWarning):
    """Islands of one rule share no variable; their tables multiply."""


@dataclass(frozen=True)
class EvalOptions:
    """Configuration for one rule evaluation."""

    join: JoinOptions = field(default_factory=JoinOptions)
    rnl_mode: str = "ar"

    def __post_init__(self):
        if self.rnl_mode not in RNL_MODES:
            raise ValueError(f"unknown rnl mode {self.rnl_mode!r}")


@dataclass
class ConditionStats:
    """Per-condition metrics feeding the sort key."""

    index: int
    cond: Condition
    rank: int
    counts: dict[int, int]
    cardinality: float
    connections: int = 0  # distinct variables shared with other islands
    sort_key: int = 0


@dataclass
class Island:
    id_var: str | None  # None for a constant-id singleton
    members: list[ConditionStats]
    cost: float
    variables: set[str]


@dataclass
class RuleAnalysis:
    rule: Rule
    stats: list[ConditionStats]
    islands: list[Island]  # ascending by cost
    links: list[dict[int, int]]  # island -> {other island: shared var count}


# --- bucket maps ------------------------------------------------------


@dataclass
class BucketMap:
    """Order-preserving map from raw metric values to small ordinals.

    Distinct values become dense ordinals when they fit the bit field.
    Otherwise values are grouped into windows of width mult * sigma
    above the minimum (sigma = population standard deviation of the raw
    values), doubling mult until the occupied windows fit.
    """

    bits: int
    distinct: list[float]
    mapping: dict[float, int]
    mult: float | None = None
    sigma: float | None = None
    _window: float | None = None
    _base: float | None = None
    _occupied: list[int] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(set(self.mapping.values()))

    def bucket(self, value: float) -> int:
        cap = 1 << self.bits
        if math.isinf(value):
            return min(self.size, cap - 1)
        hit = self.mapping.get(value)
        if hit is not None:
            return hit
        # unseen value: order-preserving interpolation
        if self._window is not None:
            w = int((value - self._base) // self._window)
            return min(bisect_left(self._occupied, w + 1), cap - 1)
        return min(bisect_left(self.distinct, value), cap - 1)


def build_bucket_map(
    values: Iterable[float], field_bits: int, start_mult: float = START_MULT
) -> BucketMap:
    raw = [float(v) for v in values if math.isfinite(v)]
    distinct = sorted(set(raw))
    cap = 1 << field_bits
    if len(distinct) <= cap:
        return BucketMap(
            field_bits, distinct, {v: i for i, v in enumerate(distinct)}
        )
    sigma = float(np.std(raw))
    base = distinct[0]
    mult = start_mult
    while True:
        window = mult * sigma
        occupied = sorted({int((v - base) // window) for v in distinct})
        if len(occupied) <= cap:
            break
        mult *= 2.0
    renumber = {w: i for i, w in enumerate(occupied)}
    mapping = {v: renumber[int((v - base) // window)] for v in distinct}
    return BucketMap(
        field_bits,
        distinct,
        mapping,
        mult=mult,
        sigma=sigma,
        _window=window,
        _base=base,
        _occupied=occupied,
    )


@dataclass
class KeyMaps:
    """Bucket maps shared by every rule planned in one batch."""

    conn: BucketMap
    score: BucketMap
    card: BucketMap


def build_key_maps(analyses: Iterable[RuleAnalysis]) -> KeyMaps:
    conn_vals: list[float] = []
    score_vals: list[float] = []
    card_vals: list[float] = []
    for a in analyses:
        conn_vals.extend(s.connections for s in a.stats)
        card_vals.extend(s.cardinality for s in a.stats)
        score_vals.extend(isl.cost for isl in a.islands)
    return KeyMaps(
        build_bucket_map(conn_vals, CONN_BITS),
        build_bucket_map(score_vals, SCORE_BITS),
        build_bucket_map(card_vals, CARD_BITS),
    )


def encode_sort_key(
    conn_bucket: int, score_bucket: int, rank: int, card_bucket: int
) -> int:
    """Pack the four priority fields, most significant first.

    Lower keys evaluate earlier.  Rank is stored as 3 - rank so that
    higher-rank (more selective) conditions come first; the other
    fields are bucket ordinals used as-is, so fewer connections, lower
    island score, and lower cardinality all sort earlier.
    """
    for value, bits, name in (
        (conn_bucket, CONN_BITS, "connection"),
        (score_bucket, SCORE_BITS, "island score"),
        (card_bucket, CARD_BITS, "cardinality"),
    ):
        if not 0 <= value < (1 << bits):
            raise ValueError(
                f"{name} bucket {value} exceeds its {bits}-bit field"
            )
    if not 0 <= rank <= 3:
        raise ValueError(f"condition rank {rank} outside [0, 3]")
    return (
        (conn_bucket << _CONN_SHIFT)
        | (score_bucket << _SCORE_SHIFT)
        | ((3 - rank) << CARD_BITS)
        | card_bucket
    )


# --- analysis ---------------------------------------------------------


def analyze_rule(rule: Rule, stats_source) -> RuleAnalysis:
    """Collect per-condition metrics and group conditions into islands."""
    stats: list[ConditionStats] = []
    for i, cond in enumerate(rule.conditions):
        counts = stats_source.component_counts(cond)
        card = float(min(counts.values())) if counts else math.inf
        stats.append(
            ConditionStats(i, cond, condition_rank(cond), counts, card)
        )

    groups: dict[object, list[ConditionStats]] = {}
    for st in stats:
        idt = st.cond.id
        key = idt.name if isinstance(idt, Variable) else ("const", st.index)
        groups.setdefault(key, []).append(st)

    islands: list[Island] = []
    for key, members in groups.items():
        id_var = key if isinstance(key, str) else None
        vars_here = {
            v.name for st in members for _, v in st.cond.variables()
        }
        cost = sum(st.cardinality for st in members)
        islands.append(Island(id_var, members, cost, vars_here))
    islands.sort(key=lambda isl: (isl.cost, isl.members[0].index))

    links: list[dict[int, int]] = [dict() for _ in islands]
    for i, a in enumerate(islands):
        for j in range(i + 1, len(islands)):
            shared = len(a.variables & islands[j].variables)
            if shared:
                links[i][j] = shared
                links[j][i] = shared

    for i, isl in enumerate(islands):
        outside: set[str] = set()
        for j, other in enumerate(islands):
            if j != i:
                outside |= other.variables
        for st in isl.members:
            st.connections = sum(
                1
                for name in {v.name for _, v in st.cond.variables()}
                if name in outside
            )
    return RuleAnalysis(rule, stats, islands, links)


def detect_islands(rule: Rule, stats_source) -> list[Island]:
    """Islands of a rule, cheapest first."""
    return analyze_rule(rule, stats_source).islands


def island_cost(island: Island) -> float:
    return sum(st.cardinality for st in island.members)


# --- planning ---------------------------------------------------------


@dataclass
class PlanStep:
    cond_index: int
    island: int  # index into analysis.islands
    join_var: str | None  # variable this step joins on (None: chain start)
    join_pos: int | None  # component position of join_var in the condition
    hook: bool  # entering a new island through a bound variable


@dataclass
class RulePlan:
    analysis: RuleAnalysis
    maps: KeyMaps
    order: list[int]  # island evaluation order
    steps: list[PlanStep]
    cross_product: bool


def _evaluation_order(
    islands: Sequence[Island], links: Sequence[dict[int, int]]
) -> tuple[list[int], bool]:
    """Chain islands: start where most other islands attach, then always
    take the cheapest island connected to what is already evaluated.

    Islands reachable only from expensive ones are thereby delegated
    until those are processed.  A remaining island with no connection
    starts a new chain, which later multiplies as a cross product.
    """
    degree = [len(l) for l in links]
    remaining = list(range(len(islands)))  # ascending cost
    order: list[int] = []
    done: set[int] = set()
    cross = False
    while remaining:
        connected = [i for i in remaining if any(j in done for j in links[i])]
        if connected:
            nxt = connected[0]
        else:
            nxt = max(remaining, key=lambda i: degree[i])
            if order and islands[nxt].variables and any(
                islands[d].variables for d in done
            ):
                cross = True
        remaining.remove(nxt)
        done.add(nxt)
        order.append(nxt)
    return order, cross


def plan_rule(
    analysis: RuleAnalysis,
    maps: KeyMaps | None = None,
    order: Sequence[int] | None = None,
) -> RulePlan:
    if maps is None:
        maps = build_key_maps([analysis])
    islands = analysis.islands
    if order is None:
        order, cross = _evaluation_order(islands, analysis.links)
    else:
        order = list(order)
        cross = False
        seen: set[int] = set()
        for i in order:
            if (
                seen
                and islands[i].variables
                and not any(
                    islands[i].variables & islands[j].variables for j in seen
                )
                and any(islands[j].variables for j in seen)
            ):
                cross = True
            seen.add(i)

    for isl in islands:
        score_bucket = maps.score.bucket(isl.cost)
        for st in isl.members:
            st.sort_key = encode_sort_key(
                maps.conn.bucket(st.connections),
                score_bucket,
                st.rank,
                maps.card.bucket(st.cardinality),
            )

    steps: list[PlanStep] = []
    bound: set[str] = set()
    for isl_idx in order:
        island = islands[isl_idx]
        members = sorted(island.members, key=lambda s: (s.sort_key, s.index))
        entry = None
        if bound:
            # hook: the member carrying an already-bound variable opens
            # the island, joined at that variable's position
            candidates = []
            for st in members:
                for pos, v in st.cond.variables():
                    if v.name in bound:
                        candidates.append((st.sort_key, st.index, pos, v.name, st))
            if candidates:
                candidates.sort(key=lambda t: t[:3])
                _, _, pos, name, st = candidates[0]
                steps.append(PlanStep(st.index, isl_idx, name, pos, hook=True))
                entry = st
        if entry is None:
            entry = members[0]
            steps.append(PlanStep(entry.index, isl_idx, None, None, hook=False))
        bound |= {v.name for _, v in entry.cond.variables()}
        for st in members:
            if st is entry:
                continue
            steps.append(
                PlanStep(st.index, isl_idx, island.id_var, POS_ID, hook=False)
            )
            bound |= {v.name for _, v in st.cond.variables()}

    plan = RulePlan(analysis, maps, list(order), steps, cross)
    if cross:
        warnings.warn(
            f"rule {analysis.rule.name!r}: some condition groups share no "
            f"variable; falling back to a cross product",
            CrossProductWarning,
            stacklevel=2,
        )
    return plan


# --- execution --------------------------------------------------------


@dataclass
class EvalResult:
    """Materialized bindings: distinct rows, ascending lexicographic."""

    vars: tuple[str, ...]
    rows: np.ndarray
    plan: RulePlan
    lookups: int

    def __len__(self) -> int:
        return self.rows.shape[0]

    def bindings(self) -> list[dict[str, int]]:
        return [
            dict(zip(self.vars, (int(x) for x in row)))
            for row in self.rows.tolist()
        ]


def _substitute(cond: Condition, pos: int, value: int) -> Condition:
    if pos == POS_ID:
        return dataclasses.replace(cond, id=value)
    if pos == 1:
        return dataclasses.replace(cond, attr=value)
    return dataclasses.replace(cond, value=value)


def _fetch(
    cond: Condition,
    step: PlanStep,
    result: JoinResult | None,
    idx: Rank1Index,
    options: EvalOptions,
) -> np.ndarray:
    if (
        options.rnl_mode == "ar"
        and step.hook
        and result is not None
        and step.join_var in result.vars
    ):
        # substitute each distinct bound value: higher-rank lookups,
        # results unioned (disjoint by construction)
        values = np.unique(result.column(step.join_var))
        parts = [
            idx.rl(_substitute(cond, step.join_pos, int(v))) for v in values
        ]
        if not parts:
            return np.empty((0, 5), dtype=np.uint64)
        return np.vstack(parts)
    return idx.rl(cond)


def evaluate_rule(
    rule: Rule,
    idx: Rank1Index,
    options: EvalOptions | None = None,
    plan: RulePlan | None = None,
) -> EvalResult:
    """Evaluate one rule's conditions against the index.

    Returns the materialized binding table; the caller applies actions.
    Lookups stop as soon as any intermediate result is empty.
    """
    options = options or EvalOptions()
    if plan is None:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", CrossProductWarning)
            plan = plan_rule(analyze_rule(rule, idx))
    start_lookups = idx.lookups
    conds = rule.conditions
    all_tests = [t for c in conds for t in c.tests]
    applied = [False] * len(all_tests)

    result: JoinResult | None = None
    empty = False
    for step in plan.steps:
        cond = conds[step.cond_index]
        if not cond.variables():
            # pure existence check, binds nothing
            if len(idx.rl(cond)) == 0:
                empty = True
                break
            continue
        facts = _fetch(cond, step, result, idx, options)
        rhs = result_from_facts(cond, facts, options.join.layout)
        if result is None:
            result = rhs
        else:
            on = step.join_var
            if on is not None and (on not in result.vars or on not in rhs.vars):
                on = None
            result = join(result, rhs, options.join, on=on)
        for i, test in enumerate(all_tests):
            if applied[i]:
                continue
            if test.left.name in result.vars and test.right.name in result.vars:
                result = apply_tests(result, [test], idx.dictionary)
                applied[i] = True
        if len(result) == 0:
            empty = True
            break

    if empty:
        vars_out = result.vars if result is not None else ()
        rows = np.empty((0, len(vars_out)), dtype=np.uint64)
    elif result is None:
        # every condition was constant and matched: one empty binding
        vars_out = ()
        rows = np.empty((1, 0), dtype=np.uint64)
    else:
        vars_out = result.vars
        rows = result.materialize()
    return EvalResult(vars_out, rows, plan, idx.lookups - start_lookups)
