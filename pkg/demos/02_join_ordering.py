"""
Islands and cost-ordered join planning
======================================

Conditions sharing an id variable form an island.  Each island is
evaluated as a unit, cheapest first, and the conditions inside an
island run most-selective first.  The priorities pack into a single
32-bit sort key, so ordering a plan is just sorting integers.
"""

import random

from hiperfact import (
    Condition,
    Fact,
    Rank1Index,
    Rule,
    StringDictionary,
    ValueType,
    Variable,
    analyze_rule,
    build_bucket_map,
    evaluate_rule,
    plan_rule,
)

rng = random.Random(42)
d = StringDictionary()
idx = Rank1Index(d)

# Two entity kinds joined through a shared province value.  Provinces
# are few, cities are many, persons are in between.
City, Person = d.intern("City"), d.intern("Person")
prov_attr, home_attr = d.intern("province"), d.intern("home")
provinces = [d.intern(f"prov{i}") for i in range(4)]
for i in range(60):
    idx.insert_fact(
        Fact(City, d.intern(f"city{i}"), prov_attr, int(ValueType.STRING),
             rng.choice(provinces))
    )
for i in range(25):
    idx.insert_fact(
        Fact(Person, d.intern(f"person{i}"), home_attr, int(ValueType.STRING),
             rng.choice(provinces))
    )

rule = Rule(
    "same_province",
    (
        Condition(Person, Variable("p"), home_attr, Variable("where"), ValueType.STRING),
        Condition(City, Variable("c"), prov_attr, Variable("where"), ValueType.STRING),
    ),
)

# The analysis finds two islands (id variables p and c) and costs them
# from index counts.  The plan then fixes evaluation order.
analysis = analyze_rule(rule, idx)
for island in analysis.islands:
    print(f"island ?{island.id_var}: cost {island.cost}")
plan = plan_rule(analysis)
print("evaluation order:", [analysis.islands[i].id_var for i in plan.order])
for step in plan.steps:
    link = f" hooked on ?{step.join_var}" if step.hook else ""
    print(f"  step: condition {step.cond_index}{link}")

res = evaluate_rule(rule, idx)
print(f"result: {res.rows.shape[0]} person/city pairs, vars {res.vars}")

# Cardinalities wider than a sort-key field are squeezed through a
# bucket map: dense ordinals when they fit, widening windows when not.
cards = [island.cost for island in analysis.islands] + [7, 900, 12_000]
bm = build_bucket_map(cards, 2)
print("bucketed cardinalities:", {c: bm.bucket(c) for c in sorted(cards)})
