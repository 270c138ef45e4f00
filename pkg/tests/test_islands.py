import math
import random
import warnings

import numpy as np
import pytest

from hiperfact.forkjoin import ForkJoinConfig
from hiperfact.index import make_index
from hiperfact.islands import (
    BucketMap,
    CrossProductWarning,
    EvalOptions,
    Island,
    analyze_rule,
    build_bucket_map,
    build_key_maps,
    detect_islands,
    encode_sort_key,
    evaluate_rule,
    island_cost,
    plan_rule,
)
from hiperfact.joins import JoinOptions
from hiperfact.model import (
    POS_ATTR,
    POS_ID,
    POS_VALUE,
    Condition,
    Fact,
    PlanningError,
    Rule,
    ValueType,
    Variable,
    encode_value,
)
from hiperfact.strings import StringDictionary

from genrules import random_instance
from oracles import enumerate_matches

SEED = 4501

REG_VALUES = [2043, 6833, 6833, 9700, 50900, 160000, 700000]

ALL_CONFIGS = [
    EvalOptions(join=JoinOptions(method=m, layout=l), rnl_mode=r)
    for m in ("hj", "mj")
    for l in ("rr", "cr")
    for r in ("ar", "dr")
]


class PinnedCounts:
    """Statistics seam: fixed component counts per condition."""

    def __init__(self, table):
        self.table = dict(table)

    def component_counts(self, cond):
        return dict(self.table[cond])


# --- bucket maps ------------------------------------------------------


def test_bucket_map_dense_ordinals_when_fitting():
    bm = build_bucket_map(REG_VALUES, 3)
    assert {v: bm.bucket(v) for v in sorted(set(REG_VALUES))} == {
        2043: 0,
        6833: 1,
        9700: 2,
        50900: 3,
        160000: 4,
        700000: 5,
    }
    assert bm.mult is None and bm.sigma is None


def test_bucket_map_windows_by_std_deviation():
    bm = build_bucket_map(REG_VALUES, 2)
    assert bm.sigma == pytest.approx(236988.01, abs=0.5)
    assert bm.mult == pytest.approx(0.05)
    assert [bm.bucket(v) for v in (2043, 6833, 9700)] == [0, 0, 0]
    assert bm.bucket(50900) == 1
    assert bm.bucket(160000) == 2
    assert bm.bucket(700000) == 3


def test_bucket_map_doubles_mult_until_fitting():
    bm = build_bucket_map(list(range(100)), 2)
    assert bm.mult is not None and bm.mult > 0.05
    buckets = [bm.bucket(v) for v in range(100)]
    assert buckets == sorted(buckets)
    assert max(buckets) <= 3


def test_bucket_map_single_value_and_infinity():
    bm = build_bucket_map([7.0, 7.0], 2)
    assert bm.bucket(7.0) == 0
    assert bm.bucket(math.inf) >= bm.bucket(7.0)
    wide = build_bucket_map([1.0, 2.0, 3.0], 10)
    assert wide.bucket(math.inf) == 3  # one past the finite ordinals


def test_bucket_map_unseen_values_keep_order():
    bm = build_bucket_map([10.0, 20.0, 30.0], 2)
    probes = [5.0, 10.0, 15.0, 20.0, 25.0, 30.0, 99.0]
    got = [bm.bucket(v) for v in probes]
    assert got == sorted(got)


def test_bucket_order_preserved_on_random_input():
    rng = random.Random(SEED)
    for bits in (2, 9, 10, 11):
        vals = [rng.uniform(0, 1e6) for _ in range(500)]
        bm = build_bucket_map(vals, bits)
        ordered = sorted(set(vals))
        buckets = [bm.bucket(v) for v in ordered]
        assert buckets == sorted(buckets)
        assert max(buckets) < (1 << bits)


# --- sort keys --------------------------------------------------------


def test_sort_key_field_packing():
    assert encode_sort_key(0, 0, 3, 0) == 0
    assert encode_sort_key(1, 2, 1, 3) == (1 << 23) | (2 << 12) | (2 << 10) | 3
    # the 2-bit field holds 3 - rank, so higher rank sorts earlier
    assert encode_sort_key(0, 0, 3, 5) < encode_sort_key(0, 0, 1, 0)


def test_sort_key_field_overflow_rejected():
    with pytest.raises(ValueError):
        encode_sort_key(512, 0, 3, 0)
    with pytest.raises(ValueError):
        encode_sort_key(0, 2048, 3, 0)
    with pytest.raises(ValueError):
        encode_sort_key(0, 0, 3, 1024)
    with pytest.raises(ValueError):
        encode_sort_key(0, 0, 4, 0)


def test_sort_key_order_equals_priority_tuple_order():
    rng = random.Random(SEED + 1)
    tuples = [
        (
            rng.randrange(512),
            rng.randrange(2048),
            rng.randrange(4),
            rng.randrange(1024),
        )
        for _ in range(1000)
    ]
    by_priority = sorted(tuples, key=lambda t: (t[0], t[1], 3 - t[2], t[3]))
    encoded = sorted(encode_sort_key(*t) for t in tuples)
    assert [encode_sort_key(*t) for t in by_priority] == encoded


# --- analysis ---------------------------------------------------------


def book_rule():
    d = StringDictionary()
    B = d.intern("Book")
    rule = Rule(
        "books",
        (
            Condition(B, Variable("x"), d.intern("title"), d.intern("t1"), ValueType.STRING),
            Condition(B, Variable("x"), d.intern("description"), Variable("v"), ValueType.STRING),
            Condition(B, Variable("x"), d.intern("author"), d.intern("jd"), ValueType.STRING),
        ),
    )
    counts = {
        rule.conditions[0]: {POS_ATTR: 10, POS_VALUE: 1},
        rule.conditions[1]: {POS_ATTR: 12},
        rule.conditions[2]: {POS_ATTR: 10, POS_VALUE: 4},
    }
    return rule, PinnedCounts(counts)


def test_single_island_aggregates_member_costs():
    rule, src = book_rule()
    analysis = analyze_rule(rule, src)
    assert len(analysis.stats) == 3
    assert len(analysis.islands) == 1
    island = analysis.islands[0]
    assert island.id_var == "x"
    assert island.cost == 1 + 12 + 4
    assert island_cost(island) == island.cost
    assert [s.connections for s in analysis.stats] == [0, 0, 0]


def test_rank0_condition_costs_infinity():
    d = StringDictionary()
    c = Condition(d.intern("T"), Variable("a"), Variable("b"), Variable("c"), ValueType.STRING)
    rule = Rule("r", (c,))
    analysis = analyze_rule(rule, PinnedCounts({c: {}}))
    assert analysis.stats[0].cardinality == math.inf
    assert analysis.islands[0].cost == math.inf


def test_constant_id_condition_forms_singleton_island():
    d = StringDictionary()
    T = d.intern("T")
    c1 = Condition(T, d.intern("k"), d.intern("a"), Variable("v"), ValueType.STRING)
    c2 = Condition(T, Variable("x"), d.intern("a"), Variable("v"), ValueType.STRING)
    rule = Rule("r", (c1, c2))
    src = PinnedCounts({c1: {POS_ID: 2, POS_ATTR: 9}, c2: {POS_ATTR: 9}})
    islands = detect_islands(rule, src)
    assert len(islands) == 2
    assert [i.id_var for i in islands] == [None, "x"]
    assert islands[0].cost == 2


def test_empty_island_cost_is_zero():
    assert island_cost(Island("x", [], 0.0, set())) == 0


# --- pinned-count planning regressions --------------------------------


def province_city_instance():
    d = StringDictionary()
    P, C = d.intern("Province"), d.intern("City")
    cc, prov, num = d.intern("cc"), d.intern("province"), d.intern("number")
    cn = d.intern("cn")
    c1 = Condition(P, Variable("y"), cc, cn, ValueType.STRING)
    c2 = Condition(P, Variable("y"), prov, Variable("p"), ValueType.STRING)
    c3 = Condition(P, Variable("y"), num, Variable("d"), ValueType.UINT32)
    c4 = Condition(C, Variable("x"), prov, Variable("p"), ValueType.STRING)
    c5 = Condition(C, Variable("x"), cc, cn, ValueType.STRING)
    c6 = Condition(C, Variable("x"), num, Variable("a"), ValueType.UINT32)
    counts = {
        c1: {POS_ATTR: 37060, POS_VALUE: 458},
        c2: {POS_ATTR: 37060},
        c3: {POS_ATTR: 37060},
        c4: {POS_ATTR: 59733},
        c5: {POS_ATTR: 59733, POS_VALUE: 923},
        c6: {POS_ATTR: 59733},
    }
    return Rule("provinces", (c1, c2, c3, c4, c5, c6)), PinnedCounts(counts)


def test_two_island_regression_cheaper_island_first():
    rule, src = province_city_instance()
    analysis = analyze_rule(rule, src)
    assert [i.id_var for i in analysis.islands] == ["y", "x"]
    assert analysis.islands[0].cost == 458 + 37060 + 37060
    assert analysis.islands[1].cost == 923 + 59733 + 59733

    plan = plan_rule(analysis)
    assert [analysis.islands[i].id_var for i in plan.order] == ["y", "x"]
    # the most selective condition of the cheap island opens the plan
    assert plan.steps[0].cond_index == 0
    assert [s.cond_index for s in plan.steps] == [0, 2, 1, 3, 4, 5]
    hook = plan.steps[3]
    assert hook.hook and hook.join_var == "p" and hook.join_pos == POS_VALUE


def store_returns_instance():
    d = StringDictionary()
    ty = {n: d.intern(n) for n in ("Customer", "StoreReturn", "CatalogSale", "StoreSale", "DateDim", "Item")}
    at = {n: d.intern(n) for n in ("key_sr", "key_cs", "key_ss", "cust", "date", "item", "year", "brand")}
    V = Variable
    cC1 = Condition(ty["Customer"], V("c"), at["key_sr"], V("v1"), ValueType.STRING)
    cC2 = Condition(ty["Customer"], V("c"), at["key_cs"], V("v2"), ValueType.STRING)
    cC3 = Condition(ty["Customer"], V("c"), at["key_ss"], V("v3"), ValueType.STRING)
    cSR = Condition(ty["StoreReturn"], V("sr"), at["cust"], V("v1"), ValueType.STRING)
    cCS = Condition(ty["CatalogSale"], V("cs"), at["cust"], V("v2"), ValueType.STRING)
    cSS1 = Condition(ty["StoreSale"], V("ss"), at["cust"], V("v3"), ValueType.STRING)
    cSS2 = Condition(ty["StoreSale"], V("ss"), at["date"], V("vd"), ValueType.STRING)
    cSS3 = Condition(ty["StoreSale"], V("ss"), at["item"], V("vi"), ValueType.STRING)
    cD = Condition(ty["DateDim"], V("vd"), at["year"], V("yy"), ValueType.UINT32)
    cI = Condition(ty["Item"], V("vi"), at["brand"], V("b"), ValueType.STRING)
    counts = {
        cC1: {POS_ATTR: 40_000},
        cC2: {POS_ATTR: 30_000},
        cC3: {POS_ATTR: 30_000},
        cSR: {POS_ATTR: 288_000},
        cCS: {POS_ATTR: 1_400_000},
        cSS1: {POS_ATTR: 1_000_000},
        cSS2: {POS_ATTR: 900_000},
        cSS3: {POS_ATTR: 900_000},
        cD: {POS_ATTR: 73_000},
        cI: {POS_ATTR: 18_000},
    }
    rule = Rule("returns", (cC1, cC2, cC3, cSR, cCS, cSS1, cSS2, cSS3, cD, cI))
    return rule, PinnedCounts(counts)


def test_six_island_regression_delegates_pendant_islands():
    rule, src = store_returns_instance()
    analysis = analyze_rule(rule, src)
    assert [i.id_var for i in analysis.islands] == ["vi", "vd", "c", "sr", "cs", "ss"]
    assert [i.cost for i in analysis.islands] == [
        18_000,
        73_000,
        100_000,
        288_000,
        1_400_000,
        2_800_000,
    ]

    plan = plan_rule(analysis)
    evaluated = [analysis.islands[i].id_var for i in plan.order]
    assert evaluated[:4] == ["c", "sr", "cs", "ss"]
    # the two pendant islands wait for the big island that links them
    assert set(evaluated[4:]) == {"vd", "vi"}
    for step in plan.steps:
        if analysis.islands[step.island].id_var in ("vd", "vi"):
            assert step.hook
            assert step.join_var in ("vd", "vi")
            assert step.join_pos == POS_ID
    assert not plan.cross_product


# --- evaluation vs oracle ---------------------------------------------


def load_index(facts, d, backend="hi"):
    idx = make_index(backend, d)
    for f in facts:
        idx.insert_fact(f)
    return idx


def engine_table(rule, idx, options, plan=None):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", CrossProductWarning)
        res = evaluate_rule(rule, idx, options, plan=plan)
    if res.rows.shape[0] == 0:
        return set(), res
    order = sorted(res.vars)
    cols = [res.vars.index(v) for v in order]
    return {tuple(row[c] for c in cols) for row in res.rows.tolist()}, res


def oracle_table(facts, rule, d):
    matches = enumerate_matches(facts, rule, d)
    if not matches:
        return set(), ()
    order = sorted(matches[0])
    return {tuple(m[v] for v in order) for m in matches}, order


def test_random_rules_match_conjunctive_oracle_under_all_configs():
    rng = random.Random(SEED + 2)
    for _ in range(25):
        d, facts, rule = random_instance(rng, max_facts=220)
        idx = load_index(facts, d)
        expected, order = oracle_table(facts, rule, d)
        for options in ALL_CONFIGS:
            got, res = engine_table(rule, idx, options)
            if expected:
                assert set(res.vars) == set(order)
            assert got == expected, f"rule {rule.name} options {options}"


def test_island_order_is_an_optimization_not_a_semantic():
    rng = random.Random(SEED + 3)
    for _ in range(10):
        d, facts, rule = random_instance(rng, max_facts=150)
        idx = load_index(facts, d)
        analysis = analyze_rule(rule, idx)
        baseline, _ = engine_table(rule, idx, EvalOptions())
        order = list(range(len(analysis.islands)))
        for _ in range(3):
            rng.shuffle(order)
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", CrossProductWarning)
                plan = plan_rule(analysis, order=order)
            got, _ = engine_table(rule, idx, EvalOptions(), plan=plan)
            assert got == baseline


def test_worker_count_invariance():
    rng = random.Random(SEED + 4)
    d, facts, rule = random_instance(rng, max_facts=200)
    idx = load_index(facts, d)
    tables = []
    for workers in (1, 2, 8):
        options = EvalOptions(
            join=JoinOptions(fork=ForkJoinConfig(worker_count=workers, block_size=4096))
        )
        tables.append(engine_table(rule, idx, options)[0])
    assert tables[0] == tables[1] == tables[2]


# --- lookup accounting ------------------------------------------------


def linked_island_store():
    d = StringDictionary()
    idx = make_index("hi", d)
    T, S = d.intern("T"), d.intern("S")
    a, b = d.intern("a"), d.intern("b")
    pv = [d.intern(f"p{i}") for i in range(4)]
    for i, k in enumerate([0, 1, 2, 3, 0, 1]):
        idx.insert_fact(Fact(T, d.intern(f"t{i}"), a, 0, pv[k]))
    for i in range(5):
        idx.insert_fact(Fact(S, d.intern(f"s{i}"), b, 0, pv[i % 4]))
    rule = Rule(
        "linked",
        (
            Condition(T, Variable("u"), a, Variable("p"), ValueType.STRING),
            Condition(S, Variable("w"), b, Variable("p"), ValueType.STRING),
        ),
    )
    return d, idx, rule


def test_ar_performs_one_lookup_per_distinct_hook_value():
    d, idx, rule = linked_island_store()
    # S island is cheaper (5 < 6) and binds 4 distinct ?p values
    ar = evaluate_rule(rule, idx, EvalOptions(rnl_mode="ar"))
    dr = evaluate_rule(rule, idx, EvalOptions(rnl_mode="dr"))
    assert dr.lookups == 2
    assert ar.lookups == 1 + 4
    assert ar.rows.tolist() == dr.rows.tolist()
    assert ar.vars == dr.vars


def test_empty_intermediate_short_circuits_lookups():
    d = StringDictionary()
    idx = make_index("hi", d)
    T, S = d.intern("T"), d.intern("S")
    a, b = d.intern("a"), d.intern("b")
    idx.insert_fact(Fact(T, d.intern("i0"), a, 0, d.intern("present")))
    idx.insert_fact(Fact(S, d.intern("i1"), b, 0, d.intern("other")))
    rule = Rule(
        "dead",
        (
            Condition(T, Variable("x"), a, d.intern("missing"), ValueType.STRING),
            Condition(S, Variable("z"), b, Variable("v"), ValueType.STRING),
        ),
    )
    res = evaluate_rule(rule, idx)
    assert res.rows.shape[0] == 0
    assert res.lookups == 1


def test_disconnected_islands_cross_product_with_warning():
    d = StringDictionary()
    idx = make_index("hi", d)
    T, S = d.intern("T"), d.intern("S")
    a, b = d.intern("a"), d.intern("b")
    for i in range(2):
        idx.insert_fact(Fact(T, d.intern(f"t{i}"), a, 0, d.intern(f"u{i}")))
    for i in range(3):
        idx.insert_fact(Fact(S, d.intern(f"s{i}"), b, 0, d.intern(f"w{i}")))
    rule = Rule(
        "apart",
        (
            Condition(T, Variable("x"), a, Variable("v"), ValueType.STRING),
            Condition(S, Variable("y"), b, Variable("w"), ValueType.STRING),
        ),
    )
    with pytest.warns(CrossProductWarning):
        plan = plan_rule(analyze_rule(rule, idx))
    assert plan.cross_product
    got, res = engine_table(rule, idx, EvalOptions(), plan=plan)
    assert len(got) == 6
    stored = [Fact(*map(int, row)) for row in idx.all_facts().tolist()]
    expected, _ = oracle_table(stored, rule, d)
    assert got == expected


def test_constant_condition_acts_as_existence_gate():
    d = StringDictionary()
    idx = make_index("hi", d)
    T, S = d.intern("T"), d.intern("S")
    flag, a = d.intern("flag"), d.intern("a")
    on = d.intern("on")
    idx.insert_fact(Fact(S, d.intern("s0"), a, 0, d.intern("w0")))
    gate_present = Condition(T, d.intern("cfg"), flag, on, ValueType.STRING)
    body = Condition(S, Variable("x"), a, Variable("v"), ValueType.STRING)

    res = evaluate_rule(Rule("gated", (gate_present, body)), idx)
    assert res.rows.shape[0] == 0  # gate fact missing: nothing matches

    idx.insert_fact(Fact(T, d.intern("cfg"), flag, 0, on))
    res = evaluate_rule(Rule("gated", (gate_present, body)), idx)
    assert res.rows.shape[0] == 1
    assert res.vars == ("x", "v")


def test_all_constant_rule_yields_single_empty_binding():
    d = StringDictionary()
    idx = make_index("hi", d)
    T = d.intern("T")
    cond = Condition(T, d.intern("k"), d.intern("a"), encode_value(ValueType.UINT32, 5), ValueType.UINT32)
    rule = Rule("const", (cond,))
    assert evaluate_rule(rule, idx).rows.shape == (0, 0)
    idx.insert_fact(Fact(T, d.intern("k"), d.intern("a"), int(ValueType.UINT32), 5))
    assert evaluate_rule(rule, idx).rows.shape == (1, 0)


def test_bad_rnl_mode_rejected():
    with pytest.raises(ValueError):
        EvalOptions(rnl_mode="both")
