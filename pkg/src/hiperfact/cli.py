"""Command line front end.

Verbs: ``generate`` writes a synthetic fact file, ``load`` checks that a
fact file parses and counts it, ``infer`` runs rules to fixpoint,
``query`` prints one query rule's table as TSV, and ``bench`` times the
load / infer / query phases together.  Query tables go to standard
output; metrics go to standard error or ``--metrics-out``.
"""

from __future__ import annotations

import argparse
import sys

from .engine import Engine, EngineConfig, PRESETS, report_metrics
from .model import PlanningError
from .synthetic import generate_synthetic
from .textio import ParseError

CONFIG_FIELDS = ("index", "join", "rnl", "result", "tree", "write", "unique")


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("engine configuration")
    g.add_argument("--preset", choices=sorted(PRESETS))
    g.add_argument("--index", choices=("ai", "hi", "lpim", "lpid"))
    g.add_argument("--join", choices=("hj", "mj"))
    g.add_argument("--rnl", choices=("ar", "dr"))
    g.add_argument("--result", choices=("rr", "cr"))
    g.add_argument("--tree", choices=("pf", "sf"))
    g.add_argument("--write", choices=("pw", "sw"))
    g.add_argument("--unique", choices=("su", "hu"))
    g.add_argument("--threads", type=int)
    g.add_argument("--block-size", type=int, dest="block_size")
    g.add_argument("--max-passes", type=int, dest="max_passes")
    m = p.add_argument_group("metrics")
    m.add_argument("--metrics", choices=("tsv", "json"))
    m.add_argument("--metrics-out", dest="metrics_out")
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hiperfact", description="in-memory fact inference engine"
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    cfg = _config_parent()

    g = sub.add_parser("generate", help="write a synthetic fact file")
    g.add_argument("--scale", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("-o", "--out", required=True)

    l = sub.add_parser("load", parents=[cfg], help="parse and count a fact file")
    l.add_argument("--facts", required=True)

    i = sub.add_parser("infer", parents=[cfg], help="run rules to fixpoint")
    i.add_argument("--facts", required=True)
    i.add_argument("--rules", required=True)

    q = sub.add_parser("query", parents=[cfg], help="print one query's table")
    q.add_argument("--facts", required=True)
    q.add_argument("--rules", required=True)
    q.add_argument("--name", required=True)

    b = sub.add_parser("bench", parents=[cfg], help="time load, infer, query")
    b.add_argument("--facts", required=True)
    b.add_argument("--rules", required=True)
    b.add_argument("--name", help="only this query (default: all queries)")
    b.set_defaults(metrics="tsv")
    return parser


def config_from_args(args) -> EngineConfig:
    base = dict(PRESETS[args.preset]) if args.preset else {}
    for name in CONFIG_FIELDS:
        value = getattr(args, name, None)
        if value is not None:
            base[name] = value
    if getattr(args, "threads", None) is not None:
        base["threads"] = args.threads
    if getattr(args, "block_size", None) is not None:
        base["block_size_bytes"] = args.block_size
    if getattr(args, "max_passes", None) is not None:
        base["max_passes"] = args.max_passes
    return EngineConfig(**base)


def _emit_metrics(engine: Engine, args) -> None:
    if not getattr(args, "metrics", None):
        return
    text = report_metrics(engine.metrics, args.metrics)
    if getattr(args, "metrics_out", None):
        with open(args.metrics_out, "w", encoding="utf-8") as fh:
            fh.write(text)
            fh.write("\n")
    else:
        print(text, file=sys.stderr)


def _run(args) -> int:
    if args.verb == "generate":
        count = generate_synthetic(args.scale, args.seed, args.out)
        print(f"facts_written\t{count}")
        return 0

    engine = Engine(config_from_args(args))
    loaded = engine.load_facts(args.facts)

    if args.verb == "load":
        print(f"facts_loaded\t{loaded}")
        _emit_metrics(engine, args)
        return 0

    engine.load_rules(args.rules)

    if args.verb == "infer":
        stats = engine.infer()
        print(f"facts_loaded\t{loaded}")
        print(f"facts_inferred\t{stats.facts_inferred}")
        print(f"passes\t{stats.passes}")
        _emit_metrics(engine, args)
        return 0

    if args.verb == "query":
        sys.stdout.write(engine.query_tsv(args.name))
        _emit_metrics(engine, args)
        return 0

    # bench: fixpoint plus every requested query, metrics only
    engine.infer()
    names = [args.name] if args.name else [
        r.name for r in engine.rules if not r.actions
    ]
    for name in names:
        engine.query(name)
    _emit_metrics(engine, args)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _run(args)
    except ParseError as exc:
        print(f"hiperfact: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, KeyError, PlanningError, RuntimeError) as exc:
        message = exc.args[0] if exc.args else exc
        print(f"hiperfact: error: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
