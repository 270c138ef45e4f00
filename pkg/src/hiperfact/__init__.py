"""In-memory fact store with rank-1 indexing, island-ordered conjunctive
queries, and level-parallel forward chaining."""

__version__ = "0.1.0"

from .model import (
    Action,
    ActionKind,
    CompareOp,
    Condition,
    Expr,
    Fact,
    PlanningError,
    Rule,
    Template,
    ValueType,
    Variable,
    VariableJoinTest,
    condition_rank,
    decode_value,
    encode_value,
)
from .strings import StringDictionary
from .index import Rank1Index, make_index
from .forkjoin import (
    ForkJoinConfig,
    keyed_payload_sort,
    parallel_merge_join,
    parallel_sort,
    parallel_unique_filter,
)
from .joins import JoinOptions
from .islands import (
    CrossProductWarning,
    EvalOptions,
    EvalResult,
    analyze_rule,
    build_bucket_map,
    evaluate_rule,
    plan_rule,
)
from .derivation import (
    DerivationGraph,
    FixpointError,
    InferenceOptions,
    InferenceStats,
    RuleType,
    active_rules,
    build_graph,
    run_inference,
)
from .engine import Engine, EngineConfig, PRESETS, QueryResult, RunMetrics
from .synthetic import generate_synthetic, iter_synthetic
from .textio import (
    ParseError,
    format_value,
    iter_facts,
    parse_facts,
    parse_rules,
    serialize_fact,
    serialize_rules,
)

__all__ = [
    "Action",
    "ActionKind",
    "CompareOp",
    "Condition",
    "CrossProductWarning",
    "DerivationGraph",
    "Engine",
    "EngineConfig",
    "EvalOptions",
    "EvalResult",
    "Expr",
    "Fact",
    "FixpointError",
    "ForkJoinConfig",
    "InferenceOptions",
    "InferenceStats",
    "JoinOptions",
    "PRESETS",
    "ParseError",
    "PlanningError",
    "QueryResult",
    "Rank1Index",
    "Rule",
    "RuleType",
    "RunMetrics",
    "StringDictionary",
    "Template",
    "ValueType",
    "Variable",
    "VariableJoinTest",
    "active_rules",
    "analyze_rule",
    "build_bucket_map",
    "build_graph",
    "condition_rank",
    "decode_value",
    "encode_value",
    "evaluate_rule",
    "format_value",
    "generate_synthetic",
    "iter_facts",
    "iter_synthetic",
    "keyed_payload_sort",
    "make_index",
    "parallel_merge_join",
    "parallel_sort",
    "parallel_unique_filter",
    "parse_facts",
    "parse_rules",
    "plan_rule",
    "run_inference",
    "serialize_fact",
    "serialize_rules",
]
