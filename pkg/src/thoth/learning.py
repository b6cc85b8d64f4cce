"""Perceptron-style weight learning for soft rules, driven by reasoner feedback."""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .query_lang import Anchor, Rule
from .rdfstar import (
    Iri,
    KnowledgeGraph,
    SemanticStream,
    iri,
    parse_timed,
    parse_turtle_star,
    stream_from_timed,
    unify_triple,
)
from .ssr import DEFAULT_CONSTRAINTS, AnswerSet, CandidateFact, ground, solve

MIN_WEIGHT = 0.01


@dataclass
class TrainingSample:
    streams: Mapping[Iri, SemanticStream]
    graph: KnowledgeGraph
    now: int
    truth: frozenset
    name: str = ""


@dataclass
class TrainResult:
    weights: dict
    converged: bool
    loss_history: list = field(default_factory=list)
    iterations: int = 0

    def apply(self, program: Sequence[Rule]) -> list[Rule]:
        return [r.with_weight(self.weights[r.id]) if r.is_soft else r for r in program]


def loss(answer: AnswerSet | set, truth) -> int:
    """Size of the symmetric difference between chosen triples and the truth."""
    chosen = answer.triples() if isinstance(answer, AnswerSet) else set(answer)
    return len(chosen ^ set(truth))


def head_patterns(rule: Rule) -> list[tuple]:
    out = []
    for item in rule.head:
        out.append(item.quoted.as_triple() if isinstance(item, Anchor) else item.terms())
    return out


def check_sample(program: Sequence[Rule], sample: TrainingSample) -> None:
    heads = [h for r in program for h in head_patterns(r)]
    for t in sample.truth:
        if not any(unify_triple(h, t, {}) is not None for h in heads):
            raise ValueError(f"ground-truth fact {t} is not an instance of any rule head")


def _reweight(cands: list[CandidateFact], weights: Mapping[Iri, float]) -> list[CandidateFact]:
    out = []
    for c in cands:
        if c.is_hard:
            out.append(c)
        else:
            out.append(CandidateFact(c.triple, c.timestamp, c.rule_id, weights[c.rule_id], c.binding))
    return out


def train(
    program: Sequence[Rule],
    samples: Sequence[TrainingSample],
    lr: float = 0.1,
    max_iters: int = 1000,
    *,
    constraints=DEFAULT_CONSTRAINTS,
    builtins: Mapping[str, Callable] | None = None,
    ticks_per_second: float = 1.0,
) -> TrainResult:
    """Adjust soft-rule weights until every sample's answer set equals its truth.

    One iteration is one pass over the samples in order. For a sample with
    non-zero loss each soft rule moves by ``lr * (uses in truth - uses in
    answer)``; weights never drop below MIN_WEIGHT.
    """
    if not lr > 0:
        raise ValueError("learning rate must be positive")
    weights = {r.id: float(r.weight) for r in program if r.is_soft}
    for s in samples:
        check_sample(program, s)
    grounded = []
    for s in samples:
        cands = []
        for rule in program:
            cands.extend(ground(rule, s.streams, s.graph, s.now, ticks_per_second=ticks_per_second, builtins=builtins))
        grounded.append(cands)

    history: list[int] = []
    converged = False
    iterations = 0
    for _ in range(max(1, max_iters)):
        iterations += 1
        epoch_loss = 0
        for s, cands in zip(samples, grounded):
            answer = solve(_reweight(cands, weights), constraints)
            sample_loss = loss(answer, s.truth)
            epoch_loss += sample_loss
            if sample_loss == 0 or not weights:
                continue
            chosen = {(c.rule_id, c.triple, c.binding) for c in answer.facts}
            for rid in sorted(weights, key=lambda r: r.value):
                mine = [c for c in cands if c.rule_id == rid]
                in_truth = sum(1 for c in mine if c.triple in s.truth)
                in_answer = sum(1 for c in mine if (c.rule_id, c.triple, c.binding) in chosen)
                weights[rid] = max(MIN_WEIGHT, weights[rid] + lr * (in_truth - in_answer))
        history.append(epoch_loss)
        if epoch_loss == 0:
            converged = True
            break
        if not weights:
            break
    return TrainResult(dict(weights), converged, history, iterations)


def load_samples(manifest: str | Path, default_stream: Iri | None = None) -> list[TrainingSample]:
    """Read a sample manifest.

    Each non-blank, non-comment line is ``data=<timed file> truth=<file> now=<tick>``
    with optional ``graph=<file>`` and ``stream=<iri>``; paths are relative to
    the manifest.
    """
    manifest = Path(manifest)
    base = manifest.parent
    default_stream = default_stream or iri(":ssr")
    samples = []
    for lineno, raw in enumerate(manifest.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = dict(part.split("=", 1) for part in shlex.split(line))
        missing = {"data", "truth", "now"} - fields.keys()
        if missing:
            raise ValueError(f"{manifest}:{lineno}: missing {', '.join(sorted(missing))}")
        uri = Iri(fields["stream"]) if "stream" in fields else default_stream
        stream = stream_from_timed(uri, parse_timed((base / fields["data"]).read_text()))
        graph = KnowledgeGraph(parse_turtle_star((base / fields["graph"]).read_text())) if "graph" in fields else KnowledgeGraph()
        truth = frozenset(parse_turtle_star((base / fields["truth"]).read_text()))
        samples.append(TrainingSample({uri: stream}, graph, int(fields["now"]), truth, fields["data"]))
    return samples
