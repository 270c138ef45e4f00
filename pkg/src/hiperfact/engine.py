"""Engine session facade: configuration matrix, loading, inference, queries.

An :class:`Engine` owns one dictionary, one index, and the current rule
set.  Inference is lazy: derivation rules run only once some query can
observe their output, so registering an ad-hoc query can trigger a
deferred fixpoint over rules that were skipped until then.
"""

from __future__ import annotations

import io
import json
import time
from dataclasses import dataclass, fields

from .derivation import (
    InferenceOptions,
    InferenceStats,
    active_rules,
    build_graph,
    run_inference,
)
from .forkjoin import DEFAULT_BLOCK_SIZE, ForkJoinConfig
from .index import Rank1Index
from .islands import EvalOptions, evaluate_rule
from .joins import JoinOptions
from .model import HANDLE_KIND, Rule, variable_kinds
from .strings import StringDictionary
from .textio import format_value, iter_facts, parse_rules

INDEX_BACKENDS = ("ai", "hi", "lpim", "lpid")

PRESETS = {
    "infer1": dict(index="lpim", join="hj", rnl="ar", result="cr",
                   tree="pf", write="pw", unique="su"),
    "query1": dict(index="ai", join="mj", rnl="ar", result="cr",
                   tree="pf", write="pw", unique="su"),
}


@dataclass(frozen=True)
class EngineConfig:
    """Full knob matrix; defaults equal the infer1 preset at one thread."""

    index: str = "lpim"
    join: str = "hj"
    rnl: str = "ar"
    result: str = "cr"
    tree: str = "pf"
    write: str = "pw"
    unique: str = "su"
    threads: int = 1
    block_size_bytes: int = DEFAULT_BLOCK_SIZE
    max_passes: int = 10_000

    def __post_init__(self):
        if self.index not in INDEX_BACKENDS:
            raise ValueError(f"unknown index backend {self.index!r}")
        if self.threads < 1:
            raise ValueError("threads must be positive")
        if self.block_size_bytes < 1:
            raise ValueError("block_size_bytes must be positive")
        # the remaining fields are validated by the option dataclasses
        self.inference_options()

    @classmethod
    def preset(cls, name: str, **overrides) -> "EngineConfig":
        try:
            base = PRESETS[name]
        except KeyError:
            raise ValueError(f"unknown preset {name!r}") from None
        return cls(**{**base, **overrides})

    def fork_config(self) -> ForkJoinConfig:
        return ForkJoinConfig(
            worker_count=self.threads, block_size=self.block_size_bytes
        )

    def eval_options(self) -> EvalOptions:
        join = JoinOptions(
            method=self.join, layout=self.result, fork=self.fork_config()
        )
        return EvalOptions(join=join, rnl_mode=self.rnl)

    def inference_options(self) -> InferenceOptions:
        return InferenceOptions(
            eval=self.eval_options(),
            tree=self.tree,
            write=self.write,
            unique=self.unique,
            max_passes=self.max_passes,
        )


@dataclass
class RunMetrics:
    load_seconds: float = 0.0
    infer_seconds: float = 0.0
    query_seconds: float = 0.0
    facts_loaded: int = 0
    facts_inferred: int = 0
    passes: int = 0
    rules_evaluated: int = 0
    rules_skipped: int = 0
    result_rows: int = 0


def report_metrics(metrics: RunMetrics, format: str = "tsv") -> str:
    pairs = [(f.name, getattr(metrics, f.name)) for f in fields(RunMetrics)]
    if format == "tsv":
        return "\n".join(
            f"{name}\t{value:.6f}" if isinstance(value, float) else f"{name}\t{value}"
            for name, value in pairs
        )
    if format == "json":
        return json.dumps(dict(pairs), indent=2)
    raise ValueError(f"unknown metrics format {format!r}")


def parse_metrics(text: str) -> RunMetrics:
    """Inverse of :func:`report_metrics` for either format."""
    text = text.strip()
    if text.startswith("{"):
        record = json.loads(text)
    else:
        record = {}
        for line in text.splitlines():
            name, value = line.split("\t")
            record[name] = value
    out = RunMetrics()
    for f in fields(RunMetrics):
        value = record[f.name]
        setattr(out, f.name, float(value) if f.type == "float" else int(value))
    return out


@dataclass
class QueryResult:
    vars: tuple[str, ...]
    rows: list[tuple[int, ...]]
    lookups: int
    kinds: dict

    def to_tsv(self, dictionary: StringDictionary) -> str:
        out = io.StringIO()
        out.write("\t".join(self.vars))
        out.write("\n")
        for row in self.rows:
            rendered = []
            for name, bits in zip(self.vars, row):
                kind = self.kinds[name]
                if kind == HANDLE_KIND:
                    rendered.append(dictionary.resolve(int(bits)))
                else:
                    rendered.append(format_value(kind, int(bits), dictionary))
            out.write("\t".join(rendered))
            out.write("\n")
        return out.getvalue()


class Engine:
    """One in-memory session: dictionary + index + rules + counters."""

    def __init__(self, config: EngineConfig | None = None,
                 dictionary: StringDictionary | None = None):
        self.config = config or EngineConfig()
        self.dictionary = dictionary or StringDictionary()
        self.index = Rank1Index(self.dictionary, backend=self.config.index)
        self.rules: list[Rule] = []
        self.counters: dict[str, int] = {}
        self.metrics = RunMetrics()
        self.last_stats: InferenceStats | None = None
        self._settled_active: frozenset[str] = frozenset()

    # -- loading ------------------------------------------------------------

    def load_fact_lines(self, lines) -> int:
        """Insert facts parsed from text lines; returns new-fact count."""
        started = time.perf_counter()
        loaded = 0
        for fact in iter_facts(lines, self.dictionary):
            loaded += bool(self.index.insert_fact(fact))
        self.metrics.load_seconds += time.perf_counter() - started
        self.metrics.facts_loaded += loaded
        self._settled_active = frozenset()  # new data can extend any fixpoint
        return loaded

    def load_facts(self, path) -> int:
        with open(path, "r", encoding="utf-8") as fh:
            return self.load_fact_lines(fh)

    def add_rules(self, rules) -> None:
        names = {r.name for r in self.rules}
        for rule in rules:
            if rule.name in names:
                raise ValueError(f"duplicate rule name {rule.name!r}")
            names.add(rule.name)
            self.rules.append(rule)
        self._settled_active = frozenset()

    def load_rules(self, path) -> list[Rule]:
        with open(path, "r", encoding="utf-8") as fh:
            rules = parse_rules(fh.read(), self.dictionary)
        self.add_rules(rules)
        return rules

    # -- inference ----------------------------------------------------------

    def infer(self) -> InferenceStats:
        """Run the active rules to fixpoint (no-op when already settled)."""
        graph = build_graph(self.rules)
        active = frozenset(active_rules(graph))
        if active <= self._settled_active:
            return self.last_stats or InferenceStats(passes=0)
        started = time.perf_counter()
        stats = run_inference(
            graph, self.index, self.config.inference_options(), self.counters
        )
        self.metrics.infer_seconds += time.perf_counter() - started
        self.metrics.facts_inferred += stats.facts_inferred
        self.metrics.passes += stats.passes
        self.metrics.rules_evaluated += stats.rules_evaluated
        self.metrics.rules_skipped += stats.rules_skipped
        self.last_stats = stats
        self._settled_active = active
        return stats

    # -- queries ------------------------------------------------------------

    def _rule_named(self, name: str) -> Rule:
        for rule in self.rules:
            if rule.name == name:
                return rule
        raise KeyError(f"no rule named {name!r}")

    def query(self, name: str | None = None, rule: Rule | None = None) -> QueryResult:
        """Evaluate one query rule, inferring first if it wakes rules up.

        Pass either the name of a registered rule or an ad-hoc ``rule``,
        which is registered before running so its dependencies activate.
        """
        if (name is None) == (rule is None):
            raise ValueError("pass exactly one of name or rule")
        if rule is not None:
            known = next((r for r in self.rules if r.name == rule.name), None)
            if known is None:
                self.add_rules([rule])
            elif known != rule:
                raise ValueError(f"rule name {rule.name!r} already taken")
        else:
            rule = self._rule_named(name)
        if rule.actions:
            raise ValueError(f"rule {rule.name!r} modifies facts; not a query")

        self.infer()
        started = time.perf_counter()
        result = evaluate_rule(rule, self.index, self.config.eval_options())
        self.counters[rule.name] = self.counters.get(rule.name, 0) + 1
        # materialized table semantics: duplicates out, rows sorted
        rows = sorted({tuple(map(int, r)) for r in result.rows.tolist()})
        self.metrics.query_seconds += time.perf_counter() - started
        self.metrics.result_rows += len(rows)
        return QueryResult(result.vars, rows, result.lookups, variable_kinds(rule))

    def query_tsv(self, name: str | None = None, rule: Rule | None = None) -> str:
        return self.query(name, rule).to_tsv(self.dictionary)
