"""Rule graph construction, level scheduling, and fixpoint inference."""

import random
import warnings

import numpy as np
import pytest

from hiperfact.derivation import (
    FixpointError,
    InferenceOptions,
    RuleType,
    _out_groups,
    active_rules,
    build_graph,
    instantiate_template,
    rule_type,
    run_inference,
)
from hiperfact.forkjoin import ForkJoinConfig
from hiperfact.index import Rank1Index
from hiperfact.islands import EvalOptions, EvalResult
from hiperfact.joins import JoinOptions
from hiperfact.model import (
    Action,
    ActionKind,
    Condition,
    Expr,
    Fact,
    Rule,
    Template,
    ValueType,
    Variable,
    encode_value,
)
from hiperfact.strings import StringDictionary

from genrules import random_ruleset
from oracles import naive_fixpoint

S = ValueType.STRING
U32 = ValueType.UINT32
B = ValueType.BOOL
D64 = ValueType.DOUBLE


def _options(tree="pf", write="pw", unique="su", workers=1, max_passes=10_000):
    fork = ForkJoinConfig(worker_count=workers)
    return InferenceOptions(
        eval=EvalOptions(join=JoinOptions(fork=fork)),
        tree=tree,
        write=write,
        unique=unique,
        max_passes=max_passes,
    )


ALL_MODES = [
    _options(tree, write, unique, workers)
    for tree in ("pf", "sf")
    for write in ("pw", "sw")
    for unique in ("su", "hu")
    for workers in ((1, 4) if tree == "pf" else (1,))
]


def _store(d, facts):
    idx = Rank1Index(d)
    for f in facts:
        idx.insert_fact(f)
    return idx


def _contents(idx):
    return {Fact(*map(int, row)) for row in idx.all_facts().tolist()}


def _add(fact_type, id_term, attr, value, vt):
    return Action(ActionKind.ADD, Template(fact_type, id_term, attr, value, vt))


# --- graph shape ------------------------------------------------------


@pytest.fixture
def symbols():
    d = StringDictionary()
    names = ("A", "B", "C", "attr", "flag", "i0", "i1", "v0", "v1")
    return d, {n: d.intern(n) for n in names}


def _producer(name, read_type, write_type, h):
    cond = Condition(read_type, Variable("x"), h["attr"], Variable("v"), S)
    return Rule(name, (cond,), (_add(write_type, Variable("x"), h["attr"], Variable("v"), S),))


def _query(name, read_type, h):
    return Rule(name, (Condition(read_type, Variable("x"), h["attr"], Variable("v"), S),))


def test_chain_edges_and_levels(symbols):
    d, h = symbols
    r1 = _producer("r1", h["A"], h["B"], h)
    r2 = _producer("r2", h["B"], h["C"], h)
    g = build_graph([r1, r2])
    assert g.children["r1"] == {"r2"}
    assert g.parents["r2"] == {"r1"}
    assert g.levels == [["r1"], ["r2"]]
    assert g.level_of == {"r1": 0, "r2": 1}


def test_independent_rules_share_level_zero(symbols):
    d, h = symbols
    r1 = _producer("r1", h["A"], h["B"], h)
    r2 = _producer("r2", h["C"], h["C"], h)  # self-contained loop on C
    g = build_graph([r1, r2])
    assert g.children["r1"] == set()
    assert g.level_of["r1"] == 0
    assert g.level_of["r2"] == 0


def _reachable(children, start):
    seen, frontier = set(), [start]
    while frontier:
        node = frontier.pop()
        for c in children[node]:
            if c not in seen:
                seen.add(c)
                frontier.append(c)
    return seen


def test_two_cycle_shares_level_zero(symbols):
    d, h = symbols
    r1 = _producer("r1", h["A"], h["B"], h)
    r2 = _producer("r2", h["B"], h["A"], h)
    g = build_graph([r1, r2])
    # mutual reachability is what puts them in one component
    assert "r2" in _reachable(g.children, "r1")
    assert "r1" in _reachable(g.children, "r2")
    assert g.level_of == {"r1": 0, "r2": 0}
    assert g.levels == [["r1", "r2"]]


def test_cycle_fed_by_root_sits_one_below_it(symbols):
    d, h = symbols
    root = _producer("root", h["C"], h["A"], h)
    r1 = _producer("r1", h["A"], h["B"], h)
    r2 = _producer("r2", h["B"], h["A"], h)
    g = build_graph([root, r1, r2])
    assert g.level_of["root"] == 0
    assert g.level_of["r1"] == 1
    assert g.level_of["r2"] == 1


def test_duplicate_rule_names_rejected(symbols):
    d, h = symbols
    r = _producer("r", h["A"], h["B"], h)
    with pytest.raises(ValueError, match="duplicate"):
        build_graph([r, _producer("r", h["B"], h["C"], h)])


def test_rule_type_classification(symbols):
    d, h = symbols
    feeder = _producer("feeder", h["A"], h["B"], h)
    consumer = _producer("consumer", h["B"], h["C"], h)
    dead_end = _producer("dead_end", h["A"], h["C"], h)
    q = _query("q", h["B"], h)
    g = build_graph([feeder, consumer, dead_end, q])
    assert rule_type(g, q) is RuleType.QUERY
    assert rule_type(g, feeder) is RuleType.DERIVATION_RULE
    # writes but nothing consumes C: still a derivation rule, just inactive
    assert rule_type(g, dead_end) is RuleType.DERIVATION_RULE
    assert "dead_end" not in active_rules(g)


def test_active_rules_chain_and_cycle(symbols):
    d, h = symbols
    d1 = _producer("d1", h["A"], h["B"], h)
    d2 = _producer("d2", h["B"], h["C"], h)
    q = _query("q", h["C"], h)
    g = build_graph([d1, d2, q])
    assert active_rules(g) == {"d1", "d2", "q"}

    c1 = _producer("c1", h["A"], h["B"], h)
    c2 = _producer("c2", h["B"], h["A"], h)
    g2 = build_graph([c1, c2, _query("q", h["A"], h)])
    # reachability oracle: a rule is active iff some query is reachable
    for rule in ("c1", "c2"):
        assert "q" in _reachable(g2.children, rule)
    assert active_rules(g2) == {"c1", "c2", "q"}


# --- fixpoint runs ----------------------------------------------------


@pytest.fixture
def chain_instance():
    d = StringDictionary()
    node, reach_t = d.intern("Node"), d.intern("Reach")
    nxt, reach = d.intern("next"), d.intern("reach")
    a, b, c, e = (d.intern(s) for s in "abcd")
    seed = [
        Fact(node, a, nxt, int(S), b),
        Fact(node, b, nxt, int(S), c),
        Fact(node, c, nxt, int(S), e),
    ]
    step = Rule(
        "step",
        (
            Condition(node, Variable("x"), nxt, Variable("y"), S),
            Condition(node, Variable("y"), nxt, Variable("z"), S),
        ),
        (_add(reach_t, Variable("x"), reach, Variable("z"), S),),
    )
    extend = Rule(
        "extend",
        (
            Condition(node, Variable("x"), nxt, Variable("y"), S),
            Condition(reach_t, Variable("y"), reach, Variable("z"), S),
        ),
        (_add(reach_t, Variable("x"), reach, Variable("z"), S),),
    )
    q = Rule("q", (Condition(reach_t, Variable("p"), reach, Variable("v"), S),))
    expected = {
        Fact(reach_t, x, reach, int(S), z)
        for x, z in [(a, c), (a, e), (b, e)]
    }
    return d, seed, [step, extend, q], expected


def test_transitive_chain_fixpoint(chain_instance):
    d, seed, rules, expected = chain_instance
    g = build_graph(rules)
    idx = _store(d, seed)
    counters = {}
    stats = run_inference(g, idx, _options(), counters)
    assert _contents(idx) - set(seed) == expected
    assert stats.passes == 2
    assert stats.facts_inferred == 3
    assert counters == {"step": 2, "extend": 2}
    assert _contents(idx) == set(naive_fixpoint(seed, rules, dictionary=d))


def test_cycle_rules_rerun_every_pass(symbols):
    d, h = symbols
    seed = [Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"])]
    c1 = _producer("c1", h["A"], h["B"], h)
    c2 = _producer("c2", h["B"], h["A"], h)
    g = build_graph([c1, c2, _query("q", h["A"], h)])
    idx = _store(d, seed)
    counters = {}
    stats = run_inference(g, idx, _options(), counters)
    assert stats.passes >= 2
    assert counters["c1"] == stats.passes
    assert counters["c2"] == stats.passes
    assert _contents(idx) == set(
        naive_fixpoint(seed, [c1, c2], dictionary=d)
    )


def test_zero_rules_single_pass(symbols):
    d, h = symbols
    idx = _store(d, [Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"])])
    stats = run_inference(build_graph([]), idx, _options())
    assert stats.passes == 1
    assert stats.facts_inferred == 0
    assert stats.rules_evaluated == 0


def test_preexisting_fact_not_counted_as_new(symbols):
    d, h = symbols
    seed = [
        Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"]),
        Fact(h["B"], h["i0"], h["attr"], int(S), h["v0"]),  # already derived
    ]
    g = build_graph([_producer("r", h["A"], h["B"], h), _query("q", h["B"], h)])
    idx = _store(d, seed)
    stats = run_inference(g, idx, _options())
    assert stats.facts_inferred == 0
    assert stats.passes == 1
    assert _contents(idx) == set(seed)


def test_overlapping_producers_deduplicate(symbols):
    d, h = symbols
    seed = [
        Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"]),
        Fact(h["C"], h["i0"], h["attr"], int(S), h["v0"]),
    ]
    # two rules derive the identical B fact from different sources
    ra = _producer("ra", h["A"], h["B"], h)
    rc = _producer("rc", h["C"], h["B"], h)
    g = build_graph([ra, rc, _query("q", h["B"], h)])
    idx = _store(d, seed)
    stats = run_inference(g, idx, _options())
    rows = idx.all_facts()
    assert len(np.unique(rows, axis=0)) == len(rows) == idx.size
    assert stats.facts_inferred == 1


def test_inactive_rule_never_evaluated(symbols):
    d, h = symbols
    seed = [Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"])]
    live = _producer("live", h["A"], h["B"], h)
    dead = _producer("dead", h["A"], h["C"], h)
    g = build_graph([live, dead, _query("q", h["B"], h)])
    idx = _store(d, seed)
    counters = {}
    stats = run_inference(g, idx, _options(), counters)
    assert counters.get("dead", 0) == 0
    assert counters["live"] == stats.passes
    assert stats.rules_skipped == stats.passes  # dead skipped once per pass
    assert h["C"] not in {f.fact_type for f in _contents(idx)}


# --- actions beyond plain adds ----------------------------------------


def test_delete_action(symbols):
    d, h = symbols
    doomed = Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"])
    kept = Fact(h["A"], h["i1"], h["attr"], int(S), h["v1"])
    flag = Fact(h["B"], h["i0"], h["flag"], int(B), 1)
    reap = Rule(
        "reap",
        (Condition(h["B"], Variable("x"), h["flag"], 1, B),),
        (
            Action(
                ActionKind.DELETE,
                Template(h["A"], Variable("x"), h["attr"], h["v0"], S),
            ),
        ),
    )
    g = build_graph([reap, _query("q", h["A"], h)])
    idx = _store(d, [doomed, kept, flag])
    stats = run_inference(g, idx, _options())
    assert _contents(idx) == {kept, flag}
    assert stats.facts_deleted == 1
    assert stats.facts_inferred == 0
    assert stats.passes == 1


def test_replace_applies_after_delete_phase(symbols):
    """A flag-gated counter bump: the delete of the gate stops pass two."""
    d, h = symbols
    count = Fact(h["A"], h["i0"], h["attr"], int(U32), 5)
    flag = Fact(h["A"], h["i0"], h["flag"], int(B), 1)
    bump = Rule(
        "bump",
        (
            Condition(h["A"], Variable("x"), h["flag"], 1, B),
            Condition(h["A"], Variable("x"), h["attr"], Variable("c"), U32),
        ),
        (
            Action(
                ActionKind.DELETE,
                Template(h["A"], Variable("x"), h["flag"], 1, B),
            ),
            Action(
                ActionKind.REPLACE,
                Template(h["A"], Variable("x"), h["attr"], Variable("c"), U32),
                Template(
                    h["A"], Variable("x"), h["attr"], Expr("+", Variable("c"), 1), U32
                ),
            ),
        ),
    )
    g = build_graph([bump, _query("q", h["A"], h)])
    idx = _store(d, [count, flag])
    stats = run_inference(g, idx, _options())
    assert _contents(idx) == {Fact(h["A"], h["i0"], h["attr"], int(U32), 6)}
    assert stats.passes == 2
    assert stats.facts_deleted == 2  # the flag and the old counter value
    assert stats.facts_inferred == 1


def test_delete_phase_runs_before_add_phase(symbols):
    d, h = symbols
    flag = Fact(h["A"], h["i0"], h["flag"], int(B), 1)
    # listed add-then-delete of the same new fact; phase order must win
    rule = Rule(
        "r",
        (Condition(h["A"], Variable("x"), h["flag"], 1, B),),
        (
            _add(h["B"], Variable("x"), h["attr"], h["v0"], S),
            Action(
                ActionKind.DELETE,
                Template(h["B"], Variable("x"), h["attr"], h["v0"], S),
            ),
            Action(
                ActionKind.DELETE,
                Template(h["A"], Variable("x"), h["flag"], 1, B),
            ),
        ),
    )
    g = build_graph([rule, _query("q", h["B"], h)])
    idx = _store(d, [flag])
    stats = run_inference(g, idx, _options())
    derived = Fact(h["B"], h["i0"], h["attr"], int(S), h["v0"])
    assert derived in _contents(idx)
    assert stats.passes == 2
    assert stats.facts_deleted == 1  # only the gate; the add outlived it


def test_replace_phase_runs_before_add_phase(symbols):
    d, h = symbols
    old = Fact(h["A"], h["i0"], h["attr"], int(S), h["v0"])
    flag = Fact(h["A"], h["i0"], h["flag"], int(B), 1)
    rule = Rule(
        "r",
        (Condition(h["A"], Variable("x"), h["flag"], 1, B),),
        (
            _add(h["A"], Variable("x"), h["attr"], h["v0"], S),  # re-adds old
            Action(
                ActionKind.DELETE,
                Template(h["A"], Variable("x"), h["flag"], 1, B),
            ),
            Action(
                ActionKind.REPLACE,
                Template(h["A"], Variable("x"), h["attr"], h["v0"], S),
                Template(h["A"], Variable("x"), h["attr"], h["v1"], S),
            ),
        ),
    )
    g = build_graph([rule, _query("q", h["A"], h)])
    idx = _store(d, [old, flag])
    run_inference(g, idx, _options())
    # replace rewired v0 -> v1, then the add phase restored v0: both live
    assert _contents(idx) == {
        old,
        Fact(h["A"], h["i0"], h["attr"], int(S), h["v1"]),
    }


def test_fixpoint_pass_limit(symbols):
    d, h = symbols
    seed = Fact(h["A"], h["i0"], h["attr"], int(U32), 0)
    runaway = Rule(
        "runaway",
        (Condition(h["A"], Variable("x"), h["attr"], Variable("c"), U32),),
        (
            Action(
                ActionKind.ADD,
                Template(
                    h["A"], Variable("x"), h["attr"], Expr("+", Variable("c"), 1), U32
                ),
            ),
        ),
    )
    g = build_graph([runaway, _query("q", h["A"], h)])
    idx = _store(d, [seed])
    with pytest.raises(FixpointError, match="4 passes"):
        run_inference(g, idx, _options(max_passes=4))


# --- template instantiation -------------------------------------------


def _result(vars, rows):
    return EvalResult(tuple(vars), np.asarray(rows, dtype=np.uint64), None, 0)


def test_expr_truncates_toward_zero():
    res = _result(["c"], [[encode_value(ValueType.INT32, -7)]])
    tmpl = Template(1, 2, 3, Expr("/", Variable("c"), 2), ValueType.INT32)
    out = instantiate_template(tmpl, res, {"c": ValueType.INT32})
    assert out[0, 4] == encode_value(ValueType.INT32, -3)


def test_expr_division_by_zero_is_ieee():
    res = _result(["c"], [[encode_value(D64, 3.0)], [encode_value(D64, 0.0)]])
    tmpl = Template(1, 2, 3, Expr("/", Variable("c"), 0), D64)
    out = instantiate_template(tmpl, res, {"c": D64})
    assert out[0, 4] == encode_value(D64, float("inf"))
    # 0/0 stores the canonical quiet NaN pattern, not the hardware one
    assert out[1, 4] == encode_value(D64, float("nan"))


def test_expr_overflow_rejected():
    res = _result(["c"], [[encode_value(ValueType.INT32, 2**31 - 1)]])
    tmpl = Template(1, 2, 3, Expr("+", Variable("c"), 1), ValueType.INT32)
    with pytest.raises(ValueError, match="out of range"):
        instantiate_template(tmpl, res, {"c": ValueType.INT32})
    neg = Template(1, 2, 3, Expr("-", 0, Variable("u")), ValueType.UINT32)
    u = _result(["u"], [[encode_value(ValueType.UINT32, 7)]])
    with pytest.raises(ValueError, match="out of range"):
        instantiate_template(neg, u, {"u": ValueType.UINT32})


def test_expr_float_narrowing_matches_codec():
    res = _result(["c"], [[encode_value(D64, 0.1)]])
    tmpl = Template(1, 2, 3, Expr("*", Variable("c"), 3), ValueType.FLOAT)
    out = instantiate_template(tmpl, res, {"c": D64})
    assert out[0, 4] == encode_value(ValueType.FLOAT, 0.1 * 3)


def test_expr_bool_is_nonzero_test():
    res = _result(["c"], [[encode_value(D64, 2.5)], [encode_value(D64, 2.5)]])
    tmpl = Template(1, 2, 3, Expr("-", Variable("c"), 2.5), B)
    out = instantiate_template(tmpl, res, {"c": D64})
    assert out[0, 4] == 0
    hit = Template(1, 2, 3, Expr("+", Variable("c"), 1), B)
    assert instantiate_template(hit, res, {"c": D64})[0, 4] == 1


def test_template_copies_bound_handles():
    res = _result(["x", "v"], [[4, 9], [5, 9]])
    tmpl = Template(7, Variable("x"), 3, Variable("v"), S)
    out = instantiate_template(tmpl, res, {"x": None, "v": None})
    assert out.tolist() == [[7, 4, 3, int(S), 9], [7, 5, 3, int(S), 9]]


# --- out-groups and mode equivalence ----------------------------------


def test_out_groups_partition_written_types(symbols):
    d, h = symbols
    ra = _producer("ra", h["A"], h["B"], h)
    rb = _producer("rb", h["A"], h["C"], h)
    rc = _producer("rc", h["C"], h["B"], h)
    groups = _out_groups([ra, rb, rc])
    named = sorted(sorted(r.name for r in g) for g in groups)
    assert named == [["ra", "rc"], ["rb"]]
    types = [set().union(*(r.written_types() for r in g)) for g in groups]
    for i, a in enumerate(types):
        for b in types[i + 1:]:
            assert not (a & b)


def test_out_groups_merge_multi_type_writer(symbols):
    d, h = symbols
    ra = _producer("ra", h["A"], h["B"], h)
    rb = _producer("rb", h["A"], h["C"], h)
    both = Rule(
        "both",
        (Condition(h["A"], Variable("x"), h["attr"], Variable("v"), S),),
        (
            _add(h["B"], Variable("x"), h["attr"], Variable("v"), S),
            _add(h["C"], Variable("x"), h["attr"], Variable("v"), S),
        ),
    )
    groups = _out_groups([ra, rb, both])
    assert len(groups) == 1
    assert {r.name for r in groups[0]} == {"ra", "rb", "both"}


@pytest.mark.parametrize("seed", range(10))
def test_random_rulesets_match_oracle(seed):
    rng = random.Random(7300 + seed)
    d, facts, rules = random_ruleset(rng, cyclic=(seed % 2 == 0))
    g = build_graph(rules)
    want = set(naive_fixpoint(facts, rules, dictionary=d))
    options = ALL_MODES[seed % len(ALL_MODES)]
    for opts in (options, _options("sf", "sw", "hu")):
        idx = _store(d, facts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stats = run_inference(g, idx, opts)
        assert _contents(idx) == want
        assert idx.size == len(want)
        assert stats.facts_inferred == len(want) - len(facts)


def test_worker_count_invariance():
    rng = random.Random(424242)
    d, facts, rules = random_ruleset(rng, cyclic=True)
    g = build_graph(rules)
    outcomes = []
    for workers in (1, 2, 8):
        idx = _store(d, facts)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            stats = run_inference(g, idx, _options(workers=workers))
        outcomes.append((frozenset(_contents(idx)), stats.facts_inferred, stats.passes))
    assert outcomes[0] == outcomes[1] == outcomes[2]


def test_options_validation():
    with pytest.raises(ValueError, match="tree"):
        InferenceOptions(tree="nope")
    with pytest.raises(ValueError, match="write"):
        InferenceOptions(write="nope")
    with pytest.raises(ValueError, match="unique"):
        InferenceOptions(unique="nope")
    with pytest.raises(ValueError, match="max_passes"):
        InferenceOptions(max_passes=0)
