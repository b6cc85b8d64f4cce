"""Stream reasoning: grounding rules over windows, and per-tick max-weight answer-set selection."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from itertools import groupby
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .query_lang import (
    Aggregate,
    Anchor,
    BinOp,
    Call,
    Query,
    Rule,
    StreamBlock,
    UnaryOp,
    expr_nodes,
    pattern_vars,
)
from .rdfstar import (
    Iri,
    KnowledgeGraph,
    Literal,
    SemanticStream,
    TimedTriple,
    Variable,
    binding_sort_key,
    graph_match,
    integer,
    substitute,
    triple_key,
    unify,
    unify_triple,
    window,
)

log = logging.getLogger("thoth.ssr")

EXACT_LIMIT = 12
HARD = math.inf


class FilterTypeError(TypeError):
    pass


class InconsistentTick(RuntimeError):
    """Hard facts cannot be jointly satisfied."""

    def __init__(self, constraint, facts=()):
        super().__init__(f"hard facts violate {constraint}")
        self.constraint = constraint
        self.facts = tuple(facts)


# ---------------------------------------------------------------------------
# evaluation context


@dataclass
class Context:
    streams: Mapping[Iri, SemanticStream]
    graph: KnowledgeGraph
    now: int
    ticks_per_second: float = 1.0
    builtins: Mapping[str, Callable] = field(default_factory=dict)

    def width_ticks(self, width_ms: int) -> int:
        return max(1, math.ceil(width_ms * self.ticks_per_second / 1000 - 1e-9))

    def block_elements(self, block: StreamBlock, source: Iri) -> list[TimedTriple]:
        stream = self.streams.get(source)
        if stream is None:
            return []
        if block.window is None:
            return window(stream, self.now, 1)
        return window(stream, self.now, self.width_ticks(block.window.width_ms))


def _match_element(pattern, element: TimedTriple, binding: dict) -> dict | None:
    if isinstance(pattern, Anchor):
        b = unify_triple(pattern.quoted.as_triple(), element.triple, binding)
        if b is None:
            b = unify(pattern.quoted, element.triple[0], binding)
        if b is None:
            return None
        return unify(pattern.time, integer(element.timestamp), b)
    b = unify_triple(pattern.terms(), element.triple, binding)
    if b is not None and pattern.time is not None:
        b = unify(pattern.time, integer(element.timestamp), b)
    return b


def _dedupe(bindings: Iterable[dict]) -> list[dict]:
    seen: dict = {}
    for b in bindings:
        seen.setdefault(binding_sort_key(b), b)
    return [seen[k] for k in sorted(seen)]


def _join_block(patterns: Sequence, elements: list[TimedTriple], bindings: list[dict]) -> list[dict]:
    remaining = list(patterns)
    while remaining:
        # most-bound pattern first
        def boundness(p):
            vs = pattern_vars(p)
            return sum(1 for v in vs if bindings and v in bindings[0]) - len(vs)

        remaining.sort(key=boundness, reverse=True)
        pattern = remaining.pop(0)
        out = []
        for b in bindings:
            for e in elements:
                nb = _match_element(pattern, e, b)
                if nb is not None:
                    out.append(nb)
        bindings = _dedupe(out)
        if not bindings:
            return []
    return bindings


def _join_static(patterns: Sequence, graph: KnowledgeGraph, bindings: list[dict]) -> list[dict]:
    for p in patterns:
        out = []
        for b in bindings:
            out.extend(graph_match(graph, p.terms(), b))
        bindings = _dedupe(out)
        if not bindings:
            return []
    return bindings


def _join_stream_block(block: StreamBlock, ctx: Context, bindings: list[dict]) -> list[dict]:
    if isinstance(block.source, Iri):
        return _join_block(block.patterns, ctx.block_elements(block, block.source), bindings)
    out = []
    by_source: dict = {}
    for b in bindings:
        src = b.get(block.source)
        if src is None:
            # unconstrained source: range over every known stream
            for uri in sorted(ctx.streams, key=lambda u: u.value):
                by_source.setdefault(uri, []).append({**b, block.source: uri})
        elif isinstance(src, Iri):
            by_source.setdefault(src, []).append(b)
    for uri in sorted(by_source, key=lambda u: u.value):
        out.extend(_join_block(block.patterns, ctx.block_elements(block, uri), by_source[uri]))
    return _dedupe(out)


def solutions(query: Query, ctx: Context, diagnostics: list | None = None) -> list[dict]:
    """Bindings satisfying positive blocks, static patterns, filters and NAF blocks."""
    bindings: list[dict] = [{}]
    bindings = _join_static(query.static_patterns, ctx.graph, bindings)
    for block in query.stream_blocks:
        if not bindings:
            break
        bindings = _join_stream_block(block, ctx, bindings)
    kept = []
    for b in bindings:
        try:
            if all(truthy(evaluate(f, b, ctx)) for f in query.filters):
                kept.append(b)
        except FilterTypeError as exc:
            if diagnostics is not None:
                diagnostics.append(str(exc))
            log.debug("tick=%s dropped binding: %s", ctx.now, exc)
    out = []
    for b in kept:
        if not any(_join_stream_block(block, ctx, [b]) for block in query.naf_blocks):
            out.append(b)
    return out


# ---------------------------------------------------------------------------
# filter expressions


def _number(v):
    if isinstance(v, bool):
        return None
    if isinstance(v, (int, float)):
        return float(v)
    if isinstance(v, Literal) and v.datatype != "boolean":
        return v.numeric()
    return None


def truthy(v) -> bool:
    if isinstance(v, bool):
        return v
    if isinstance(v, Literal) and v.datatype == "boolean":
        return v.lexical == "true"
    n = _number(v)
    if n is not None:
        return n != 0
    raise FilterTypeError(f"no boolean value for {v!r}")


def _compare(op: str, a, b) -> bool:
    na, nb = _number(a), _number(b)
    if na is not None and nb is not None:
        return {"<": na < nb, ">": na > nb, "=": na == nb, "<=": na <= nb, ">=": na >= nb, "!=": na != nb}[op]
    if op in ("=", "!="):
        same = a == b
        return same if op == "=" else not same
    raise FilterTypeError(f"cannot compare {a!r} {op} {b!r}")


def evaluate(expr, binding: Mapping, ctx: Context | None = None, aggregates: Mapping | None = None):
    if isinstance(expr, Variable):
        if expr not in binding:
            raise FilterTypeError(f"unbound variable ?{expr.name}")
        return binding[expr]
    if isinstance(expr, Aggregate):
        if aggregates is None or expr not in aggregates:
            raise FilterTypeError("aggregate outside grouping")
        return aggregates[expr]
    if isinstance(expr, BinOp):
        if expr.op == "&&":
            return truthy(evaluate(expr.left, binding, ctx, aggregates)) and truthy(
                evaluate(expr.right, binding, ctx, aggregates)
            )
        if expr.op == "||":
            return truthy(evaluate(expr.left, binding, ctx, aggregates)) or truthy(
                evaluate(expr.right, binding, ctx, aggregates)
            )
        a = evaluate(expr.left, binding, ctx, aggregates)
        b = evaluate(expr.right, binding, ctx, aggregates)
        if expr.op in ("<", ">", "=", "<=", ">=", "!="):
            return _compare(expr.op, a, b)
        na, nb = _number(a), _number(b)
        if na is None or nb is None:
            raise FilterTypeError(f"non-numeric operand for {expr.op}")
        if expr.op == "+":
            return na + nb
        if expr.op == "-":
            return na - nb
        if expr.op == "*":
            return na * nb
        if nb == 0:
            raise FilterTypeError("division by zero")
        return na / nb
    if isinstance(expr, UnaryOp):
        v = evaluate(expr.operand, binding, ctx, aggregates)
        if expr.op == "!":
            return not truthy(v)
        n = _number(v)
        if n is None:
            raise FilterTypeError("non-numeric operand for unary -")
        return -n
    if isinstance(expr, Call):
        fn = (ctx.builtins if ctx is not None else {}).get(expr.name)
        if fn is None:
            raise FilterTypeError(f"builtin {expr.name!r} is not available")
        args = [evaluate(a, binding, ctx, aggregates) for a in expr.args]
        try:
            return fn(*args)
        except (KeyError, ValueError, TypeError) as exc:
            raise FilterTypeError(f"{expr.name} failed: {exc}") from exc
    return expr  # constant term


# ---------------------------------------------------------------------------
# grounding


@dataclass(frozen=True)
class CandidateFact:
    triple: tuple
    timestamp: int
    rule_id: Iri
    weight: float
    binding: tuple  # sorted (var name, canonical term) pairs

    @property
    def is_hard(self) -> bool:
        return math.isinf(self.weight)

    def key(self) -> str:
        return f"{triple_key(self.triple)} @{self.timestamp} {self.rule_id.n3()} {self.binding}"


def instantiate(template, binding: Mapping, now: int) -> tuple[tuple, int]:
    if isinstance(template, Anchor):
        triple = tuple(substitute(t, binding) for t in template.quoted.as_triple())
        time_var = template.time
    else:
        triple = tuple(substitute(t, binding) for t in template.terms())
        time_var = template.time
    ts = now
    if time_var is not None:
        value = binding.get(time_var)
        n = _number(value) if value is not None else None
        if n is None:
            raise FilterTypeError(f"time variable ?{time_var.name} is not an integer")
        ts = int(n)
    return triple, ts


def ground(
    rule: Rule,
    streams: Mapping[Iri, SemanticStream],
    graph: KnowledgeGraph,
    now: int,
    *,
    ticks_per_second: float = 1.0,
    builtins: Mapping[str, Callable] | None = None,
) -> list[CandidateFact]:
    """One candidate per head template item per satisfying binding, in canonical order."""
    ctx = Context(streams, graph, now, ticks_per_second, builtins or {})
    weight = HARD if rule.weight is None else float(rule.weight)
    out = []
    for b in solutions(rule.query, ctx):
        key = binding_sort_key(b)
        for item in rule.head:
            try:
                triple, ts = instantiate(item, b, now)
            except FilterTypeError as exc:
                log.debug("tick=%s rule=%s dropped head: %s", now, rule.id.value, exc)
                continue
            if not isinstance(triple[1], Iri) or any(isinstance(t, Variable) for t in triple):
                continue
            out.append(CandidateFact(triple, ts, rule.id, weight, key))
    return out


# ---------------------------------------------------------------------------
# selection


@dataclass(frozen=True)
class FunctionalRole:
    """At most one value per key: position='subject' keys on subject, 'object' on object."""

    predicate: Iri
    position: str = "subject"

    def conflicts(self, a: tuple, b: tuple) -> bool:
        if a[1] != self.predicate or b[1] != self.predicate or a == b:
            return False
        if self.position == "subject":
            return a[0] == b[0] and a[2] != b[2]
        return a[2] == b[2] and a[0] != b[0]


@dataclass(frozen=True)
class HardRuleViolation:
    """A set of triples that may not all hold together."""

    triples: frozenset
    label: str = ""


Constraint = FunctionalRole | HardRuleViolation

SOSA_IS_SAMPLE_OF = Iri("http://www.w3.org/ns/sosa/isSampleOf")
DEFAULT_CONSTRAINTS = (FunctionalRole(SOSA_IS_SAMPLE_OF, "subject"), FunctionalRole(SOSA_IS_SAMPLE_OF, "object"))


@dataclass(frozen=True)
class AnswerSet:
    facts: tuple = ()
    total_weight: float = 0.0

    def triples(self) -> set:
        return {f.triple for f in self.facts}


def set_weight(facts: Iterable[CandidateFact]) -> float:
    return math.fsum(sorted(f.weight for f in facts if not f.is_hard))


def _conflict(a: CandidateFact, b: CandidateFact, functional: Sequence[FunctionalRole]):
    for c in functional:
        if c.conflicts(a.triple, b.triple):
            return c
    return None


def _violated_nogood(triples: set, nogoods: Sequence[HardRuleViolation]):
    for ng in nogoods:
        if ng.triples and ng.triples <= triples:
            return ng
    return None


def better(weight_a: float, keys_a: list, weight_b: float, keys_b: list) -> bool:
    """Selection order: larger total weight, then lexicographically smaller sorted key list."""
    if weight_a != weight_b:
        return weight_a > weight_b
    return keys_a < keys_b


def _exact(cands: list, mandatory_triples: set, functional, nogoods) -> list:
    n = len(cands)
    conflict = [0] * n
    for i in range(n):
        for j in range(i + 1, n):
            if _conflict(cands[i], cands[j], functional):
                conflict[i] |= 1 << j
                conflict[j] |= 1 << i
    best_sel: list = []
    best_w = 0.0
    best_keys: list = []

    def visit(i: int, chosen: list, mask: int):
        nonlocal best_sel, best_w, best_keys
        if i == n:
            if nogoods and _violated_nogood(mandatory_triples | {c.triple for c in chosen}, nogoods):
                return
            w = set_weight(chosen)
            keys = sorted(c.key() for c in chosen)
            if better(w, keys, best_w, best_keys):
                best_sel, best_w, best_keys = list(chosen), w, keys
            return
        if not (mask >> i) & 1:
            chosen.append(cands[i])
            visit(i + 1, chosen, mask | conflict[i])
            chosen.pop()
        visit(i + 1, chosen, mask)

    visit(0, [], 0)
    return best_sel


def _components(cands: list, functional) -> list[list]:
    parent = list(range(len(cands)))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for i in range(len(cands)):
        for j in range(i + 1, len(cands)):
            if _conflict(cands[i], cands[j], functional):
                parent[find(i)] = find(j)
    groups: dict = {}
    for i, c in enumerate(cands):
        groups.setdefault(find(i), []).append(c)
    return list(groups.values())


def _assignment(cands: list, functional) -> list | None:
    """Optimal selection when the component is one predicate, functional in both positions."""
    preds = {c.triple[1] for c in cands}
    if len(preds) != 1:
        return None
    pred = next(iter(preds))
    positions = {f.position for f in functional if f.predicate == pred}
    if positions != {"subject", "object"}:
        return None
    subjects = sorted({c.triple[0] for c in cands}, key=lambda t: t.n3())
    objects = sorted({c.triple[2] for c in cands}, key=lambda t: t.n3())
    si = {s: i for i, s in enumerate(subjects)}
    oi = {o: i for i, o in enumerate(objects)}
    gain = np.zeros((len(subjects), len(objects)))
    for c in cands:
        gain[si[c.triple[0]], oi[c.triple[2]]] += c.weight
    rows, cols = linear_sum_assignment(gain, maximize=True)
    pairs = {(subjects[r], objects[c]) for r, c in zip(rows, cols) if gain[r, c] > 0}
    return [c for c in cands if (c.triple[0], c.triple[2]) in pairs]


def _greedy(cands: list, mandatory_triples: set, functional, nogoods) -> list:
    chosen: list = []
    triples = set(mandatory_triples)
    for c in sorted(cands, key=lambda c: (-c.weight, c.key())):
        if any(_conflict(c, d, functional) for d in chosen):
            continue
        if nogoods and _violated_nogood(triples | {c.triple}, nogoods):
            continue
        chosen.append(c)
        triples.add(c.triple)
    return chosen


def solve(candidates: Sequence[CandidateFact], constraints: Sequence[Constraint] = ()) -> AnswerSet:
    """Constraint-satisfying subset of maximum total weight; hard facts are mandatory.

    Up to EXACT_LIMIT soft candidates the search is exhaustive, with ties going
    to the lexicographically smallest sorted list of fact keys. Larger inputs
    are split into conflict components; each is solved exhaustively, by optimal
    assignment (one predicate functional both ways), or greedily.
    """
    functional = [c for c in constraints if isinstance(c, FunctionalRole)]
    nogoods = [c for c in constraints if isinstance(c, HardRuleViolation)]
    hard = [c for c in candidates if c.is_hard]
    soft = [c for c in candidates if not c.is_hard]
    for i, a in enumerate(hard):
        for b in hard[i + 1:]:
            c = _conflict(a, b, functional)
            if c is not None:
                raise InconsistentTick(c, (a, b))
    hard_triples = {c.triple for c in hard}
    ng = _violated_nogood(hard_triples, nogoods)
    if ng is not None:
        raise InconsistentTick(ng, hard)
    soft = [c for c in soft if not any(_conflict(c, h, functional) for h in hard)]
    soft.sort(key=lambda c: c.key())
    if len(soft) <= EXACT_LIMIT:
        chosen = _exact(soft, hard_triples, functional, nogoods)
    elif nogoods:
        chosen = _greedy(soft, hard_triples, functional, nogoods)
    else:
        chosen = []
        for comp in _components(soft, functional):
            if len(comp) <= EXACT_LIMIT:
                chosen.extend(_exact(comp, hard_triples, functional, []))
                continue
            picked = _assignment(comp, functional)
            chosen.extend(picked if picked is not None else _greedy(comp, hard_triples, functional, []))
    facts = sorted(hard + chosen, key=lambda c: c.key())
    return AnswerSet(tuple(facts), set_weight(facts))


def brute_force_solve(candidates: Sequence[CandidateFact], constraints: Sequence[Constraint] = ()) -> AnswerSet:
    """Reference enumeration over every subset; use only on small inputs."""
    functional = [c for c in constraints if isinstance(c, FunctionalRole)]
    nogoods = [c for c in constraints if isinstance(c, HardRuleViolation)]
    cands = sorted(candidates, key=lambda c: c.key())
    best = None
    for mask in range(1 << len(cands)):
        subset = [c for i, c in enumerate(cands) if (mask >> i) & 1]
        if any(c.is_hard for c in cands if c not in subset):
            continue
        if any(
            c.conflicts(a.triple, b.triple) for c in functional for i, a in enumerate(subset) for b in subset[i + 1:]
        ):
            continue
        if _violated_nogood({c.triple for c in subset}, nogoods):
            continue
        w = set_weight(subset)
        keys = sorted(c.key() for c in subset)
        if best is None or better(w, keys, best[0], best[1]):
            best = (w, keys, subset)
    if best is None:
        raise InconsistentTick("no feasible subset")
    return AnswerSet(tuple(best[2]), best[0])


# ---------------------------------------------------------------------------
# reasoning loop


@dataclass
class Reasoner:
    """Holds a rule program and evaluates it once per tick."""

    rules: list
    constraints: Sequence[Constraint] = DEFAULT_CONSTRAINTS
    builtins: Mapping[str, Callable] = field(default_factory=dict)
    ticks_per_second: float = 1.0

    def candidates(self, streams, graph, now) -> list[CandidateFact]:
        out = []
        for rule in self.rules:
            out.extend(
                ground(rule, streams, graph, now, ticks_per_second=self.ticks_per_second, builtins=self.builtins)
            )
        return out

    def tick(self, streams, graph, now, output: SemanticStream | None = None):
        return evaluate_tick(
            self.rules, streams, graph, now,
            constraints=self.constraints, builtins=self.builtins,
            ticks_per_second=self.ticks_per_second, output=output,
        )


def evaluate_tick(
    program: Sequence[Rule],
    streams: Mapping[Iri, SemanticStream],
    graph: KnowledgeGraph,
    now: int,
    *,
    constraints: Sequence[Constraint] = DEFAULT_CONSTRAINTS,
    builtins: Mapping[str, Callable] | None = None,
    ticks_per_second: float = 1.0,
    output: SemanticStream | None = None,
) -> tuple[AnswerSet, list[TimedTriple]]:
    """Ground every rule, select the answer set, and append its head facts to ``output``."""
    per_rule = []
    candidates: list[CandidateFact] = []
    for rule in program:
        cands = ground(rule, streams, graph, now, ticks_per_second=ticks_per_second, builtins=builtins)
        per_rule.append((rule, cands))
        candidates.extend(cands)
    answer = solve(candidates, constraints)
    chosen_by_rule = {}
    for f in answer.facts:
        chosen_by_rule[f.rule_id] = chosen_by_rule.get(f.rule_id, 0) + 1
    for rule, cands in per_rule:
        log.info("tick=%d rule=%s candidates=%d chosen=%d", now, rule.id.value, len(cands), chosen_by_rule.get(rule.id, 0))
    emitted = sorted({(f.timestamp, triple_key(f.triple)): TimedTriple(f.triple, f.timestamp) for f in answer.facts}.items())
    elements = [e for _, e in emitted]
    if output is not None:
        for e in elements:
            last = output.elements[-1].timestamp if output.elements else 0
            output.append(e.triple, max(e.timestamp, last))
    return answer, elements


# ---------------------------------------------------------------------------
# SELECT evaluation (centralised reference for the federator)


def _aggregate(agg: Aggregate, rows: list[dict]):
    if agg.arg is None:
        return integer(len(rows))
    values = [r[agg.arg] for r in rows if agg.arg in r]
    if agg.distinct:
        values = list({v.n3(): v for v in values}.values())
    if agg.func == "COUNT":
        return integer(len(values))
    nums = [_number(v) for v in values]
    if any(n is None for n in nums):
        raise FilterTypeError(f"{agg.func} over non-numeric values")
    if not nums:
        return integer(0) if agg.func == "SUM" else None
    if agg.func == "SUM":
        total = math.fsum(nums)
    elif agg.func == "MIN":
        total = min(nums)
    elif agg.func == "MAX":
        total = max(nums)
    else:
        total = math.fsum(nums) / len(nums)
    return Literal(repr(float(total)), "decimal")


def _as_term(v):
    if isinstance(v, bool):
        return Literal("true" if v else "false", "boolean")
    if isinstance(v, int):
        return integer(v)
    if isinstance(v, float):
        return Literal(repr(v), "decimal")
    return v


def _sort_value(v):
    n = _number(v)
    if n is not None:
        return (0, n, "")
    return (1, 0.0, v.n3() if hasattr(v, "n3") else str(v))


def order_rows(rows: list[tuple], names: list[Variable], order_by) -> list[tuple]:
    """Stable ORDER BY with canonical-text tiebreak; no ORDER BY sorts canonically."""
    rows = sorted(rows, key=lambda r: tuple("" if t is None else t.n3() for t in r))
    if order_by is None:
        return rows
    def key(r):
        env = {v: t for v, t in zip(names, r) if t is not None}
        try:
            return _sort_value(evaluate(order_by.expr, env))
        except FilterTypeError:
            return (2, 0.0, "")
    return sorted(rows, key=key, reverse=order_by.descending)


def evaluate_select(
    query: Query,
    streams: Mapping[Iri, SemanticStream],
    graph: KnowledgeGraph,
    now: int,
    *,
    ticks_per_second: float = 1.0,
    builtins: Mapping[str, Callable] | None = None,
) -> list[tuple]:
    """Rows of a SELECT query, one tuple of terms per row in projection order."""
    ctx = Context(streams, graph, now, ticks_per_second, builtins or {})
    sols = solutions(query, ctx)
    items = query.form.items
    names = [i if isinstance(i, Variable) else i.alias for i in items]
    aggs = query.aggregates()
    if not aggs:
        rows = [tuple(s.get(v) for v in names) for s in sols]
        if query.form.distinct:
            rows = list({tuple(t.n3() for t in r): r for r in rows}.values())
        return order_rows(rows, names, query.order_by)
    needed = {a.aggregate for a in aggs}
    if query.having is not None:
        needed |= {n for n in expr_nodes(query.having) if isinstance(n, Aggregate)}
    def group_key(s):
        return tuple(s[v].n3() for v in query.group_by)
    rows = []
    for _, members in groupby(sorted(sols, key=group_key), key=group_key):
        members = list(members)
        keys = {v: members[0][v] for v in query.group_by}
        values = {a: _aggregate(a, members) for a in needed}
        env = dict(keys)
        for a in aggs:
            env[a.alias] = values[a.aggregate]
        if query.having is not None and not truthy(evaluate(query.having, env, ctx, values)):
            continue
        rows.append(tuple(env.get(v) for v in names))
    return order_rows(rows, names, query.order_by)
