"""Command-line entry point: ``thoth <subcommand>``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import default_rules
from .federation import execute_centralized, execute_federated, rewrite, truck_events
from .learning import load_samples, train
from .mot import TrackerConfig, read_detection_log, run_tracker, write_assignments
from .query_lang import QueryError, parse_query, parse_rule_document, serialize_ast, serialize_rule
from .rdfstar import (
    KnowledgeGraph,
    RdfSyntaxError,
    iri,
    parse_timed,
    parse_turtle_star,
    serialize_timed,
    stream_from_timed,
)
from .simulator import ScenarioConfig, build_topology, calibrate, emit_csv, load_scenario, run_simulation
from .ssr import evaluate_tick


def _write(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _seed_override() -> int | None:
    raw = os.environ.get("THOTH_SEED")
    return int(raw) if raw not in (None, "") else None


def _scenario(path: str | None) -> ScenarioConfig:
    seed = _seed_override()
    if path is None:
        cfg = ScenarioConfig()
        return replace(cfg, seed=seed) if seed is not None else cfg
    return load_scenario(path, seed=seed)


def cmd_parse(args) -> int:
    text = Path(args.file).read_text()
    try:
        if args.file.endswith(".rules"):
            out = serialize_ast(parse_rule_document(text))
        elif args.file.endswith((".ttl", ".ttls")):
            out = serialize_timed(parse_timed(text))
        else:
            out = serialize_ast(parse_query(text))
    except QueryError as exc:
        for d in exc.errors:
            print(f"{args.file}:{d}", file=sys.stderr)
        return 1
    except RdfSyntaxError as exc:
        print(f"{args.file}:{exc}", file=sys.stderr)
        return 1
    _write(out if out.endswith("\n") else out + "\n", args.out)
    return 0


def cmd_reason(args) -> int:
    program = parse_rule_document(Path(args.program).read_text())
    uri = iri(args.stream_uri)
    stream = stream_from_timed(uri, parse_timed(Path(args.stream).read_text()))
    graph = KnowledgeGraph(parse_turtle_star(Path(args.graph).read_text())) if args.graph else KnowledgeGraph()
    emitted = []
    for tick in range(args.start, args.start + args.ticks):
        _, out = evaluate_tick(program, {uri: stream}, graph, tick, ticks_per_second=args.tps)
        emitted.extend(out)
    _write(serialize_timed(emitted), args.out)
    return 0


def cmd_track(args) -> int:
    records = read_detection_log(args.detections)
    if args.rules:
        text = Path(args.rules).read_text()
    else:
        text = default_rules("deepsort" if args.deepsort else "sort")
    rules = parse_rule_document(text)
    cfg = TrackerConfig(max_age=args.max_age, spawn_score=args.spawn_score, gallery_capacity=args.gallery)
    _write(write_assignments(run_tracker(records, rules, cfg)), args.out)
    return 0


def cmd_learn(args) -> int:
    program = [r.with_weight(1.0) if r.is_soft else r for r in parse_rule_document(Path(args.program).read_text())]
    samples = load_samples(args.samples)
    result = train(program, samples, args.lr, args.max_iters)
    lines = [f"{rid.value} {result.weights[rid]:.6f}" for rid in sorted(result.weights, key=lambda r: r.value)]
    lines.append(f"converged {str(result.converged).lower()}")
    lines.append(f"iterations {result.iterations}")
    lines.append("loss " + " ".join(str(x) for x in result.loss_history))
    _write("\n".join(lines) + "\n", args.out)
    if args.program_out:
        Path(args.program_out).write_text("\n".join(serialize_rule(r) for r in result.apply(program)))
    return 0 if result.converged else 2


def cmd_federate_check(args) -> int:
    query = parse_query(Path(args.query).read_text())
    cfg = _scenario(args.scenario)
    state, _ = build_topology(cfg)
    rng = np.random.default_rng(cfg.seed)
    streams = truck_events(state, rng, args.now)
    plan = rewrite(query, state)
    fed = execute_federated(query, state, streams, args.now, plan=plan)
    central = execute_centralized(query, state, streams, args.now)
    lines = [f"topology {cfg.topology} cameras {cfg.num_cameras} seed {cfg.seed}"]
    for f in plan.fragments:
        lines.append(f"fragment {f.id} at {f.placement} streams {len(f.streams)}")
    if plan.fallback:
        lines.append(f"fallback {plan.note}")
    for row in fed:
        lines.append("row " + " ".join("UNDEF" if t is None else t.n3() for t in row))
    equal = fed == central
    lines.append(f"federated {len(fed)} centralized {len(central)} equal {'yes' if equal else 'no'}")
    _write("\n".join(lines) + "\n", args.out)
    return 0 if equal else 1


def cmd_simulate(args) -> int:
    cfg = _scenario(args.scenario)
    if args.calibrate:
        cfg = calibrate(cfg)
        print(
            f"calibrated link_latency_rsu_cloud={cfg.link_latency_rsu_cloud} "
            f"link_latency_edge_cloud={cfg.link_latency_edge_cloud}",
            file=sys.stderr,
        )
    if args.sweep:
        cams = [int(x) for x in args.sweep.split(",") if x.strip()]
        runs = [run_simulation(replace(cfg, topology=t, num_cameras=n)) for t in ("DC", "DEC") for n in cams]
    else:
        runs = [run_simulation(cfg)]
    text = emit_csv(runs, args.out)
    if not args.out:
        sys.stdout.write(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="thoth", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log per-tick reasoning to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("parse", help="parse a query, rule document or timed Turtle-star file")
    s.add_argument("file")
    s.add_argument("--out")
    s.set_defaults(func=cmd_parse)

    s = sub.add_parser("reason", help="evaluate a rule program over a timed stream")
    s.add_argument("--program", required=True)
    s.add_argument("--stream", required=True)
    s.add_argument("--ticks", type=int, required=True)
    s.add_argument("--start", type=int, default=0)
    s.add_argument("--graph")
    s.add_argument("--stream-uri", default=":ssr")
    s.add_argument("--tps", type=float, default=1.0, help="ticks per second of window widths")
    s.add_argument("--out")
    s.set_defaults(func=cmd_reason)

    s = sub.add_parser("track", help="rule-driven tracking over a detection log")
    s.add_argument("--detections", required=True)
    s.add_argument("--rules")
    s.add_argument("--deepsort", action="store_true")
    s.add_argument("--max-age", type=int, default=5)
    s.add_argument("--spawn-score", type=float, default=0.5)
    s.add_argument("--gallery", type=int, default=100)
    s.add_argument("--out")
    s.set_defaults(func=cmd_track)

    s = sub.add_parser("learn", help="learn soft-rule weights from labelled samples")
    s.add_argument("--program", required=True)
    s.add_argument("--samples", required=True)
    s.add_argument("--lr", type=float, default=0.1)
    s.add_argument("--max-iters", type=int, default=1000)
    s.add_argument("--program-out")
    s.add_argument("--out")
    s.set_defaults(func=cmd_learn)

    s = sub.add_parser("federate-check", help="compare federated and centralized answers")
    s.add_argument("--query", required=True)
    s.add_argument("--scenario")
    s.add_argument("--now", type=int, default=1000)
    s.add_argument("--out")
    s.set_defaults(func=cmd_federate_check)

    s = sub.add_parser("simulate", help="run the DC/DEC delay simulation")
    s.add_argument("--scenario")
    s.add_argument("--sweep")
    s.add_argument("--calibrate", action="store_true")
    s.add_argument("--out")
    s.set_defaults(func=cmd_simulate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"thoth {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
