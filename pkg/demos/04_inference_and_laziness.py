"""
Forward chaining, levels, and lazy rules
========================================

Rules are layered by which fact types they read and write; each pass
runs level by level until a pass adds nothing.  Rules that no query
can reach are never evaluated at all, until an ad-hoc query suddenly
needs them.
"""

from hiperfact import Engine, EngineConfig, parse_rules

engine = Engine(EngineConfig.preset("infer1", threads=4))

# A little flight network.  Reachability is the classic self-feeding
# rule: its output type is also one of its inputs.
engine.load_fact_lines(
    [
        "Flight\tvie\tto\tzrh\tstring",
        "Flight\tzrh\tto\tcdg\tstring",
        "Flight\tcdg\tto\tlis\tstring",
        "Flight\tvie\tto\tbud\tstring",
    ]
)
engine.add_rules(
    parse_rules(
        """
        rule "direct" {
          when: (Flight ?a to ?b string)
          then: add (Reach ?a city ?b string)
        }
        rule "connect" {
          when: (Reach ?a city ?b string) (Flight ?b to ?c string)
          then: add (Reach ?a city ?c string)
        }
        rule "audit" {
          when: (Flight ?a to ?b string)
          then: add (Audit ?a seen ?b string)
        }
        rule "reachable" {
          when: (Reach ?from city ?to string)
          then:
        }
        """,
        engine.dictionary,
    )
)

stats = engine.infer()
print(f"fixpoint after {stats.passes} passes, {stats.facts_inferred} facts inferred")

# "audit" writes a type no query reads, so the derivation graph marks
# it inactive and inference skipped it entirely.
print("evaluations:", {r.name: engine.counters.get(r.name, 0) for r in engine.rules})

print(engine.query_tsv("reachable"))

# An ad-hoc query over Audit activates the sleeping rule: the engine
# re-infers (only what is now reachable) and the counter moves.
adhoc = parse_rules(
    """
    rule "audited" {
      when: (Audit ?a seen ?b string)
      then:
    }
    """,
    engine.dictionary,
)[0]
rows = engine.query(rule=adhoc).rows
print(f"audit rows after waking the rule: {len(rows)}")
print("evaluations now:", {r.name: engine.counters.get(r.name, 0) for r in engine.rules})

# Accumulated session metrics, ready for the CLI's --metrics output.
m = engine.metrics
print(f"metrics: {m.facts_loaded} loaded, {m.facts_inferred} inferred, "
      f"{m.result_rows} result rows")
