import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus, crossing_scene
from thoth.mot import generate_synthetic_scene, run_tracker, score_tracking
from thoth.query_lang import parse_rule_document
from thoth.rdfstar import KnowledgeGraph, SemanticStream, TimedTriple, iri, parse_timed, stream_from_timed
from thoth.ssr import (
    DEFAULT_CONSTRAINTS,
    EXACT_LIMIT,
    HARD,
    SOSA_IS_SAMPLE_OF,
    CandidateFact,
    FunctionalRole,
    HardRuleViolation,
    InconsistentTick,
    brute_force_solve,
    evaluate_tick,
    ground,
    solve,
)

SSR = iri(":ssr")
RULE_A = iri("ssr:a")
RULE_B = iri("ssr:b")


def enters_setup():
    rules = parse_rule_document(corpus("rules", "enters_fov.rules").read_text())
    stream = stream_from_timed(SSR, parse_timed(corpus("data", "enters.ttls").read_text()))
    return rules, {SSR: stream}


def link(box, obj, weight, rule=RULE_A, ts=0):
    triple = (iri(f":{box}"), SOSA_IS_SAMPLE_OF, iri(f":{obj}"))
    return CandidateFact(triple, ts, rule, weight, (("B", box), ("O", obj)))


# -- grounding ----------------------------------------------------------------


def test_enters_fov_fires_at_detection_time():
    rules, streams = enters_setup()
    out = SemanticStream(iri(":out"))
    answer, emitted = evaluate_tick(rules, streams, KnowledgeGraph(), 7, output=out)
    assert [(e.triple, e.timestamp) for e in emitted] == [((iri(":o1"), iri(":enters"), iri("ssr:FoV")), 7)]
    assert answer.total_weight == 1.0
    assert len(out.elements) == 1


def test_enters_fov_blocked_by_naf():
    # :o2 is already in the field of view at tick 8
    rules, streams = enters_setup()
    assert ground(rules[0], streams, KnowledgeGraph(), 8) == []


def test_score_filter_is_strict():
    rules, _ = enters_setup()
    text = corpus("data", "enters.ttls").read_text().replace('"0.9"', '"0.8"')
    streams = {SSR: stream_from_timed(SSR, parse_timed(text))}
    assert ground(rules[0], streams, KnowledgeGraph(), 7) == []


def test_window_expiry():
    rules, streams = enters_setup()
    # the detection block has no window, so only the current tick is visible
    assert ground(rules[0], streams, KnowledgeGraph(), 9) == []


def test_unknown_stream_grounds_nothing():
    rules, _ = enters_setup()
    assert ground(rules[0], {}, KnowledgeGraph(), 7) == []


# -- selection ----------------------------------------------------------------


def test_heavier_conflicting_fact_wins():
    a = link("b1", "o1", 2.0, RULE_A)
    b = link("b1", "o2", 1.5, RULE_B)
    answer = solve([a, b], DEFAULT_CONSTRAINTS)
    assert answer.facts == (a,)
    assert answer.total_weight == 2.0


def test_empty_candidates():
    answer = solve([], DEFAULT_CONSTRAINTS)
    assert answer.facts == () and answer.total_weight == 0.0


def test_tie_goes_to_smallest_key():
    a = link("b1", "o1", 1.0)
    b = link("b1", "o2", 1.0)
    assert solve([b, a], DEFAULT_CONSTRAINTS).facts == (a,)


def test_three_by_three_matches_brute_force():
    weights = [[0.9, 0.8, 0.1], [0.85, 0.2, 0.3], [0.1, 0.7, 0.6]]
    cands = [link(f"b{i}", f"o{j}", w) for i, row in enumerate(weights) for j, w in enumerate(row)]
    got = solve(cands, DEFAULT_CONSTRAINTS)
    want = brute_force_solve(cands, DEFAULT_CONSTRAINTS)
    assert got.triples() == want.triples()
    # best permutation: b0-o1, b1-o0, b2-o2 = 0.8 + 0.85 + 0.6
    assert got.total_weight == pytest.approx(2.25)


def test_hard_conflict_is_inconsistent():
    a = link("b1", "o1", HARD)
    b = link("b1", "o2", HARD)
    with pytest.raises(InconsistentTick):
        solve([a, b], DEFAULT_CONSTRAINTS)


def test_hard_fact_excludes_conflicting_soft():
    hard = link("b1", "o1", HARD)
    soft = link("b1", "o2", 5.0)
    answer = solve([hard, soft], DEFAULT_CONSTRAINTS)
    assert answer.facts == (hard,)
    assert answer.total_weight == 0.0


def test_nogood_over_hard_facts_raises():
    a = link("b1", "o1", HARD)
    b = link("b2", "o2", HARD)
    ng = HardRuleViolation(frozenset({a.triple, b.triple}), "exclusive")
    with pytest.raises(InconsistentTick) as info:
        solve([a, b], [ng])
    assert info.value.constraint == ng


def test_nogood_drops_lighter_soft_fact():
    a = link("b1", "o1", 1.0)
    b = link("b2", "o2", 2.0)
    ng = HardRuleViolation(frozenset({a.triple, b.triple}))
    assert solve([a, b], [ng]).facts == (b,)


def test_identical_triples_do_not_conflict():
    role = FunctionalRole(SOSA_IS_SAMPLE_OF, "subject")
    t = (iri(":b"), SOSA_IS_SAMPLE_OF, iri(":o"))
    assert not role.conflicts(t, t)


def test_large_assignment_component():
    # 5x5 fully connected, beyond the exhaustive limit
    n = 5
    cands = [link(f"b{i}", f"o{j}", 1.0 if i == j else 0.5) for i in range(n) for j in range(n)]
    assert len(cands) > EXACT_LIMIT
    answer = solve(cands, DEFAULT_CONSTRAINTS)
    assert answer.total_weight == pytest.approx(5.0)
    assert {(f.triple[0].value[-2:], f.triple[2].value[-2:]) for f in answer.facts} == {
        (f"b{i}", f"o{i}") for i in range(n)
    }


# -- properties ---------------------------------------------------------------

cand_specs = st.lists(
    st.tuples(st.integers(0, 3), st.integers(0, 3), st.sampled_from([0.25, 0.5, 1.0, 1.5, 2.0, 3.0])),
    max_size=EXACT_LIMIT,
    unique_by=lambda t: (t[0], t[1]),
)


def build(specs, scale=1.0):
    return [link(f"b{b}", f"o{o}", w * scale) for b, o, w in specs]


def feasible(facts, constraints=DEFAULT_CONSTRAINTS):
    return not any(
        c.conflicts(a.triple, b.triple) for c in constraints for i, a in enumerate(facts) for b in facts[i + 1:]
    )


@settings(max_examples=150, deadline=None)
@given(cand_specs)
def test_exact_solver_is_optimal(specs):
    cands = build(specs)
    got = solve(cands, DEFAULT_CONSTRAINTS)
    want = brute_force_solve(cands, DEFAULT_CONSTRAINTS)
    assert feasible(list(got.facts))
    assert got.total_weight == want.total_weight
    assert set(got.facts) == set(want.facts)


@settings(max_examples=100, deadline=None)
@given(cand_specs, st.sampled_from([0.5, 2.0, 4.0]))
def test_positive_scaling_keeps_selection(specs, k):
    base = solve(build(specs), DEFAULT_CONSTRAINTS)
    scaled = solve(build(specs, k), DEFAULT_CONSTRAINTS)
    assert base.triples() == scaled.triples()
    assert scaled.total_weight == pytest.approx(k * base.total_weight)


@settings(max_examples=100, deadline=None)
@given(cand_specs)
def test_solve_is_deterministic_under_permutation(specs):
    cands = build(specs)
    assert solve(cands, DEFAULT_CONSTRAINTS) == solve(list(reversed(cands)), DEFAULT_CONSTRAINTS)


@settings(max_examples=60, deadline=None)
@given(cand_specs, st.integers(0, 3))
def test_adding_candidate_never_lowers_optimum(specs, extra):
    cands = build(specs)
    before = solve(cands, DEFAULT_CONSTRAINTS).total_weight
    new = link(f"b{extra}", "o9", 1.0)
    after = solve(cands + [new], DEFAULT_CONSTRAINTS).total_weight
    assert after >= before


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(1, 10), min_size=1, max_size=6))
def test_naf_is_monotone(in_fov_ticks):
    """Adding :inFOV facts can only remove enters conclusions."""
    rules, streams = enters_setup()
    base = {f.triple for f in ground(rules[0], streams, KnowledgeGraph(), 7)}
    fov = (iri(":o1"), iri(":inFOV"), iri("ssr:FoV"))
    extra = [TimedTriple(fov, t) for t in in_fov_ticks]
    merged = stream_from_timed(SSR, list(streams[SSR].elements) + extra)
    blocked = {f.triple for f in ground(rules[0], {SSR: merged}, KnowledgeGraph(), 7)}
    assert blocked <= base


def test_weights_summed_exactly():
    cands = [link(f"b{i}", f"o{i}", 0.1) for i in range(10)]
    assert solve(cands, DEFAULT_CONSTRAINTS).total_weight == math.fsum([0.1] * 10)


# -- end to end over the association rules -----------------------------------


def test_sort_program_against_oracle(sort_rules):
    spec = crossing_scene()
    spec.objects = spec.objects[:1]
    records, truth = generate_synthetic_scene(spec)
    records = [r for r in records if r.frame < 3]
    truth = [t for t in truth if t[0] < 3]
    assignments = run_tracker(records, sort_rules)
    score = score_tracking(assignments, truth)
    assert score.switches == 0 and score.misses == 0
