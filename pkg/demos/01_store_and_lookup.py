"""
Storing facts and looking them up by rank
=========================================

A fact is a typed quintuple: (fact type, id, attribute, value type,
value).  Strings live in a dictionary that hands out integer handles,
so the store itself only ever touches 64-bit numbers.
"""

from hiperfact import (
    Condition,
    Fact,
    Rank1Index,
    StringDictionary,
    ValueType,
    Variable,
    condition_rank,
    encode_value,
)

d = StringDictionary()
idx = Rank1Index(d)

# A tiny geography: cities with their province and a population count.
City = d.intern("City")
province, population = d.intern("province"), d.intern("population")
rows = [
    ("vienna", "lower_austria", 1_900_000),
    ("linz", "upper_austria", 210_000),
    ("wels", "upper_austria", 64_000),
    ("graz", "styria", 295_000),
]
for name, prov, pop in rows:
    idx.insert_fact(
        Fact(City, d.intern(name), province, int(ValueType.STRING), d.intern(prov))
    )
    idx.insert_fact(
        Fact(
            City,
            d.intern(name),
            population,
            int(ValueType.UINT32),
            encode_value(ValueType.UINT32, pop),
        )
    )
print(f"stored {idx.size} facts about {len(rows)} cities")

# A condition is a fact-shaped pattern.  Its rank counts the concrete
# slots among id/attr/value; higher rank means a sharper lookup.
upper = Condition(
    City, Variable("c"), province, d.intern("upper_austria"), ValueType.STRING
)
print(f"condition rank: {condition_rank(upper)}")

# Rank-1 and rank-n lookups return (n, 5) arrays of matching facts.
for row in idx.rl(upper).tolist():
    print("  match:", d.resolve(row[1]))

# Cardinality estimates drive join ordering later on: the index keeps
# one inverted map per component, and the smallest count wins.
print("counts per component:", idx.component_counts(upper))
print("condition cardinality:", idx.condition_cardinality(upper))

# Every public lookup is counted; inference uses this to prove which
# rules never ran.
print("lookups so far:", idx.lookups)
