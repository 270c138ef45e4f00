"""Rule dependency graph, level scheduling, and fixpoint inference.

Rules form a graph over fact types: an edge runs from a producer to
every rule reading one of its written types.  Strongly connected
components collapse onto one level; levels execute in order with a
barrier between the read phase (rule evaluation) and the write phase
(deduplicated index updates), and the whole schedule repeats until a
pass inserts nothing new.

Rules without a query among their descendants are never evaluated;
their work could not reach any output.
"""

from __future__ import annotations

import enum
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forkjoin import parallel_unique_filter
from .index import Rank1Index
from .islands import (
    EvalOptions,
    EvalResult,
    analyze_rule,
    build_key_maps,
    evaluate_rule,
    plan_rule,
)
from .model import (
    ActionKind,
    Expr,
    Fact,
    Rule,
    Template,
    ValueType,
    Variable,
    variable_kinds,
)

TREE_MODES = ("pf", "sf")
WRITE_MODES = ("pw", "sw")
UNIQUE_MODES = ("su", "hu")

DEFAULT_MAX_PASSES = 10_000


class RuleType(enum.Enum):
    DERIVATION_RULE = "derivation"
    QUERY = "query"


@dataclass(frozen=True)
class InferenceOptions:
    eval: EvalOptions = field(default_factory=EvalOptions)
    tree: str = "pf"
    write: str = "pw"
    unique: str = "su"
    max_passes: int = DEFAULT_MAX_PASSES

    def __post_init__(self):
        if self.tree not in TREE_MODES:
            raise ValueError(f"unknown tree mode {self.tree!r}")
        if self.write not in WRITE_MODES:
            raise ValueError(f"unknown write mode {self.write!r}")
        if self.unique not in UNIQUE_MODES:
            raise ValueError(f"unknown unique filter {self.unique!r}")
        if self.max_passes < 1:
            raise ValueError("max_passes must be positive")


class FixpointError(RuntimeError):
    """Inference still produced new facts when the pass limit was hit."""


@dataclass
class DerivationGraph:
    rules: list[Rule]
    by_name: dict[str, Rule]
    children: dict[str, set[str]]
    parents: dict[str, set[str]]
    levels: list[list[str]]
    level_of: dict[str, int]


def build_graph(rules) -> DerivationGraph:
    """Dependency graph plus level assignment.

    A rule is a child of every rule writing a fact type it reads.
    Levels come from the condensation of the graph: cycles share the
    level of their component, roots sit at level 0.
    """
    rules = list(rules)
    by_name: dict[str, Rule] = {}
    for r in rules:
        if r.name in by_name:
            raise ValueError(f"duplicate rule name {r.name!r}")
        by_name[r.name] = r

    children: dict[str, set[str]] = {r.name: set() for r in rules}
    parents: dict[str, set[str]] = {r.name: set() for r in rules}
    for p in rules:
        written = p.written_types()
        if not written:
            continue
        for c in rules:
            if written & c.read_types():
                children[p.name].add(c.name)
                parents[c.name].add(p.name)

    comp_of = _tarjan_components([r.name for r in rules], children)

    # condensation edges and longest-path layering
    n_comps = 1 + max(comp_of.values()) if comp_of else 0
    comp_children: list[set[int]] = [set() for _ in range(n_comps)]
    indegree = [0] * n_comps
    for p, cs in children.items():
        for c in cs:
            a, b = comp_of[p], comp_of[c]
            if a != b and b not in comp_children[a]:
                comp_children[a].add(b)
                indegree[b] += 1
    comp_level = [0] * n_comps
    queue = [i for i in range(n_comps) if indegree[i] == 0]
    while queue:
        i = queue.pop()
        for j in comp_children[i]:
            comp_level[j] = max(comp_level[j], comp_level[i] + 1)
            indegree[j] -= 1
            if indegree[j] == 0:
                queue.append(j)

    level_of = {name: comp_level[comp_of[name]] for name in by_name}
    depth = 1 + max(level_of.values()) if level_of else 0
    levels: list[list[str]] = [[] for _ in range(depth)]
    for r in rules:  # original order within a level
        levels[level_of[r.name]].append(r.name)
    return DerivationGraph(rules, by_name, children, parents, levels, level_of)


def _tarjan_components(nodes, children) -> dict[str, int]:
    """Iterative Tarjan; returns node -> component ordinal."""
    index_of: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    comp_of: dict[str, int] = {}
    counter = [0]
    comps = [0]

    for root in nodes:
        if root in index_of:
            continue
        work = [(root, iter(sorted(children[root])))]
        index_of[root] = low[root] = counter[0]
        counter[0] += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            node, it = work[-1]
            advanced = False
            for child in it:
                if child not in index_of:
                    index_of[child] = low[child] = counter[0]
                    counter[0] += 1
                    stack.append(child)
                    on_stack.add(child)
                    work.append((child, iter(sorted(children[child]))))
                    advanced = True
                    break
                if child in on_stack:
                    low[node] = min(low[node], index_of[child])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[node])
            if low[node] == index_of[node]:
                while True:
                    member = stack.pop()
                    on_stack.discard(member)
                    comp_of[member] = comps[0]
                    if member == node:
                        break
                comps[0] += 1
    return comp_of


def rule_type(graph: DerivationGraph, rule: Rule) -> RuleType:
    """Action-free rules only read; everything else derives facts."""
    return RuleType.QUERY if not rule.actions else RuleType.DERIVATION_RULE


def active_rules(graph: DerivationGraph) -> set[str]:
    """Names of rules from which some query is reachable (queries
    included).  Everything else can be skipped without affecting any
    query result."""
    queries = {r.name for r in graph.rules if not r.actions}
    active = set(queries)
    frontier = list(queries)
    while frontier:
        node = frontier.pop()
        for p in graph.parents[node]:
            if p not in active:
                active.add(p)
                frontier.append(p)
    return active


# --- action instantiation ---------------------------------------------

# valid iff lo <= trunc(v) < hi; all bounds are exact in float64
_INT_BOUNDS = {
    ValueType.INT32: (-(2.0**31), 2.0**31),
    ValueType.INT64: (-(2.0**63), 2.0**63),
    ValueType.UINT32: (0.0, 2.0**32),
    ValueType.UINT64: (0.0, 2.0**64),
}

# hardware 0/0 sets the sign bit; store the canonical quiet NaN instead
# so equal-looking derived facts deduplicate
_NAN_BITS64 = np.uint64(0x7FF8_0000_0000_0000)
_NAN_BITS32 = np.uint32(0x7FC0_0000)


def _decoded_operand(term, res: EvalResult, kinds) -> np.ndarray:
    if isinstance(term, Variable):
        col = res.rows[:, res.vars.index(term.name)]
        kind = kinds[term.name]
        if kind is ValueType.INT32:
            return col.astype(np.uint32).view(np.int32).astype(np.float64)
        if kind is ValueType.INT64:
            return col.view(np.int64).astype(np.float64)
        if kind is ValueType.FLOAT:
            return col.astype(np.uint32).view(np.float32).astype(np.float64)
        if kind is ValueType.DOUBLE:
            return col.view(np.float64)
        return col.astype(np.float64)  # uint32/uint64/bool
    return np.full(res.rows.shape[0], float(term), dtype=np.float64)


def _expr_column(expr: Expr, res: EvalResult, kinds, vt: ValueType) -> np.ndarray:
    a = _decoded_operand(expr.left, res, kinds)
    b = _decoded_operand(expr.right, res, kinds)
    with np.errstate(divide="ignore", invalid="ignore"):
        if expr.op == "+":
            v = a + b
        elif expr.op == "-":
            v = a - b
        elif expr.op == "*":
            v = a * b
        elif expr.op == "/":
            v = a / b
        else:
            raise ValueError(f"unknown operator {expr.op!r}")
    if vt is ValueType.DOUBLE:
        bits = v.view(np.uint64)
        nan = np.isnan(v)
        return np.where(nan, _NAN_BITS64, bits) if nan.any() else bits
    if vt is ValueType.FLOAT:
        f = v.astype(np.float32)
        bits = f.view(np.uint32)
        nan = np.isnan(f)
        if nan.any():
            bits = np.where(nan, _NAN_BITS32, bits)
        return bits.astype(np.uint64)
    if vt is ValueType.BOOL:
        return (v != 0.0).astype(np.uint64)
    t = np.trunc(v)
    lo, hi = _INT_BOUNDS[vt]
    with np.errstate(invalid="ignore"):
        bad = ~np.isfinite(t) | (t < lo) | (t >= hi)
    if bad.any():
        raise ValueError(f"arithmetic result out of range for {vt.type_name}")
    if vt is ValueType.INT32:
        return (t.astype(np.int64) & 0xFFFFFFFF).astype(np.uint64)
    if vt is ValueType.INT64:
        return t.astype(np.int64).view(np.uint64)
    return t.astype(np.uint64)


def instantiate_template(tmpl: Template, res: EvalResult, kinds) -> np.ndarray:
    """(n, 5) fact rows for one action template over all match rows."""
    n = res.rows.shape[0]
    out = np.empty((n, 5), dtype=np.uint64)
    out[:, 0] = tmpl.fact_type
    out[:, 3] = int(tmpl.value_type)
    for pos, col in ((0, 1), (1, 2), (2, 4)):
        term = tmpl.terms()[pos]
        if isinstance(term, Variable):
            out[:, col] = res.rows[:, res.vars.index(term.name)]
        elif isinstance(term, Expr):
            out[:, col] = _expr_column(term, res, kinds, tmpl.value_type)
        else:
            out[:, col] = np.uint64(term)
    return out


# --- inference --------------------------------------------------------


@dataclass
class InferenceStats:
    passes: int = 0
    facts_inferred: int = 0
    facts_deleted: int = 0
    rules_evaluated: int = 0
    rules_skipped: int = 0


class _HashUniqueFilter:
    """Quintuple hash set seeded lazily per fact type from the index."""

    def __init__(self, idx: Rank1Index):
        self.idx = idx
        self.seen: dict[int, set[tuple]] = {}

    def fresh(self, candidates: np.ndarray) -> list[tuple]:
        out = []
        for row in candidates.tolist():
            t = row[0]
            pool = self.seen.get(t)
            if pool is None:
                pool = {
                    tuple(r) for r in self.idx.facts_of_type(t).tolist()
                }
                self.seen[t] = pool
            key = tuple(row)
            if key not in pool:
                pool.add(key)
                out.append(key)
        return out


def _apply_rule_actions(
    rule: Rule, res: EvalResult, idx: Rank1Index, options: InferenceOptions
) -> tuple[int, int]:
    """Write phase for one rule: deletes, then replaces, then adds."""
    if res.rows.shape[0] == 0:
        return 0, 0
    kinds = variable_kinds(rule)
    inserted = deleted = 0

    for action in rule.actions:
        if action.kind is not ActionKind.DELETE:
            continue
        for row in instantiate_template(action.template, res, kinds).tolist():
            deleted += bool(idx.delete_fact(Fact(*row)))

    for action in rule.actions:
        if action.kind is not ActionKind.REPLACE:
            continue
        old = instantiate_template(action.template, res, kinds).tolist()
        new = instantiate_template(action.replacement, res, kinds).tolist()
        for old_row, new_row in zip(old, new):
            deleted += bool(idx.delete_fact(Fact(*old_row)))
            inserted += bool(idx.insert_fact(Fact(*new_row)))

    add_tables = [
        instantiate_template(a.template, res, kinds)
        for a in rule.actions
        if a.kind is ActionKind.ADD
    ]
    if add_tables:
        candidates = np.vstack(add_tables)
        if options.unique == "su":
            fresh = parallel_unique_filter(
                candidates, idx, options.eval.join.fork
            )
            for row in fresh.tolist():
                inserted += bool(idx.insert_fact(Fact(*row)))
        else:
            hu = _HashUniqueFilter(idx)
            for key in hu.fresh(candidates):
                inserted += bool(idx.insert_fact(Fact(*key)))
    return inserted, deleted


def _out_groups(rules: list[Rule]) -> list[list[Rule]]:
    """Partition a level's rules so no two groups write a common type.

    Rules writing several types pull all of them into one merged group.
    """
    groups: list[tuple[set[int], list[Rule]]] = []
    for rule in rules:
        written = rule.written_types()
        touching = [g for g in groups if g[0] & written]
        for g in touching:
            groups.remove(g)
        types = set(written)
        members: list[Rule] = []
        for g in touching:
            types |= g[0]
            members.extend(g[1])
        members.append(rule)
        groups.append((types, members))
    return [members for _, members in groups]


def run_inference(
    graph: DerivationGraph,
    idx: Rank1Index,
    options: InferenceOptions | None = None,
    counters: dict[str, int] | None = None,
) -> InferenceStats:
    """Evaluate active derivation rules level by level until fixpoint.

    ``counters`` (rule name -> evaluation count) is updated in place
    when given, letting callers observe which rules ever ran.
    """
    options = options or InferenceOptions()
    active = active_rules(graph)
    stats = InferenceStats()
    workers = options.eval.join.fork.worker_count

    level_rules: list[list[Rule]] = [
        [graph.by_name[name] for name in level if graph.by_name[name].actions]
        for level in graph.levels
    ]

    for _ in range(options.max_passes):
        stats.passes += 1
        new_facts = 0
        for rules in level_rules:
            runnable = [r for r in rules if r.name in active]
            stats.rules_skipped += len(rules) - len(runnable)
            if not runnable:
                continue

            # metric buckets and sort keys are shared across the level
            analyses = [analyze_rule(r, idx) for r in runnable]
            maps = build_key_maps(analyses)
            plans = {
                a.rule.name: plan_rule(a, maps) for a in analyses
            }
            groups = _out_groups(runnable)

            def evaluate_group(group: list[Rule]):
                return [
                    (r, evaluate_rule(r, idx, options.eval, plan=plans[r.name]))
                    for r in group
                ]

            if options.tree == "pf" and workers > 1 and len(groups) > 1:
                with ThreadPoolExecutor(max_workers=workers) as ex:
                    evaluated = list(ex.map(evaluate_group, groups))
            else:
                evaluated = [evaluate_group(g) for g in groups]
            # barrier: all reads done before any write below

            for group in evaluated:
                for r, _ in group:
                    stats.rules_evaluated += 1
                    if counters is not None:
                        counters[r.name] = counters.get(r.name, 0) + 1

            def write_group(group):
                ins = dels = 0
                for r, res in group:
                    i, d = _apply_rule_actions(r, res, idx, options)
                    ins += i
                    dels += d
                return ins, dels

            if options.write == "pw" and workers > 1 and len(evaluated) > 1:
                with ThreadPoolExecutor(max_workers=workers) as ex:
                    outcomes = list(ex.map(write_group, evaluated))
            else:
                outcomes = [write_group(g) for g in evaluated]
            # barrier: writes land before the next level reads

            for ins, dels in outcomes:
                new_facts += ins
                stats.facts_deleted += dels
        stats.facts_inferred += new_facts
        if new_facts == 0:
            return stats
    raise FixpointError(
        f"no fixpoint after {options.max_passes} passes; "
        f"{stats.facts_inferred} facts inferred so far"
    )
