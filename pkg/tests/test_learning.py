import itertools

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus
from thoth.learning import MIN_WEIGHT, TrainingSample, load_samples, loss, train
from thoth.query_lang import parse_rule_document
from thoth.rdfstar import KnowledgeGraph, iri, parse_timed, stream_from_timed
from thoth.ssr import SOSA_IS_SAMPLE_OF, AnswerSet, DEFAULT_CONSTRAINTS, ground, solve

SSR = iri(":ssr")
PROX = iri("ssr:by_proximity")
COLOUR = iri("ssr:by_colour")


def program():
    return parse_rule_document(corpus("learning", "program.rules").read_text())


def sample(near, colour, truth, name=""):
    """One tick of :near / :sameColour hints; truth is a list of (box, obj)."""
    lines = ["@time 1 ."]
    lines += [f":{b} :near :{o} ." for b, o in near]
    lines += [f":{b} :sameColour :{o} ." for b, o in colour]
    stream = stream_from_timed(SSR, parse_timed("\n".join(lines)))
    facts = frozenset((iri(f":{b}"), SOSA_IS_SAMPLE_OF, iri(f":{o}")) for b, o in truth)
    return TrainingSample({SSR: stream}, KnowledgeGraph(), 1, facts, name)


def test_loss_is_symmetric_difference():
    t1 = (iri(":a"), iri(":p"), iri(":b"))
    t2 = (iri(":a"), iri(":p"), iri(":c"))
    assert loss(set(), set()) == 0
    assert loss({t1}, {t1}) == 0
    assert loss({t1}, {t2}) == 2
    assert loss({t1, t2}, {t1}) == 1
    assert loss(AnswerSet(), {t1}) == 1


def test_conflicting_heads_learn_colour():
    # equal weights tie toward proximity's key; truth says colour
    s = sample([("b", "o1")], [("b", "o2")], [("b", "o2")])
    result = train(program(), [s], lr=0.1)
    assert result.converged
    assert result.weights[COLOUR] > result.weights[PROX]
    assert result.loss_history[-1] == 0


def test_already_correct_is_a_fixed_point():
    s = sample([("b", "o1")], [("b", "o1")], [("b", "o1")])
    result = train(program(), [s])
    assert result.converged and result.iterations == 1
    assert result.weights == {PROX: 1.0, COLOUR: 1.0}


def test_contradictory_samples_do_not_converge():
    s1 = sample([("b", "o1")], [("b", "o2")], [("b", "o2")])
    s2 = sample([("b", "o1")], [("b", "o2")], [("b", "o1")])
    result = train(program(), [s1, s2], lr=0.1, max_iters=50)
    assert not result.converged
    assert result.iterations == 50
    assert all(w >= MIN_WEIGHT for w in result.weights.values())


def test_bad_learning_rate():
    with pytest.raises(ValueError):
        train(program(), [], lr=0)
    with pytest.raises(ValueError):
        train(program(), [], lr=-0.5)


def test_no_soft_rules_stops_after_one_pass():
    hard = [r.with_weight(None) for r in program()][:1]
    result = train(hard, [sample([("b", "o1")], [], [("b", "o2")])], max_iters=10)
    assert result.weights == {}
    assert not result.converged
    assert result.iterations == 1


def test_truth_outside_rule_heads_is_rejected():
    s = sample([("b", "o1")], [], [])
    s.truth = frozenset({(iri(":b"), iri(":owns"), iri(":o1"))})
    with pytest.raises(ValueError):
        train(program(), [s])


def test_corpus_manifest():
    samples = load_samples(corpus("learning", "manifest.txt"))
    assert [s.name for s in samples] == ["s1.ttls", "s2.ttls"]
    result = train(program(), samples, lr=0.1)
    assert result.converged
    assert result.weights[COLOUR] == pytest.approx(1.1)
    assert result.weights[PROX] == pytest.approx(0.9)
    for s in samples:
        assert loss(answer_for(result.apply(program()), s), s.truth) == 0


def test_manifest_missing_field(tmp_path):
    m = tmp_path / "m.txt"
    m.write_text("data=x.ttls now=1\n")
    with pytest.raises(ValueError, match="truth"):
        load_samples(m)


def answer_for(rules, s):
    cands = [c for r in rules for c in ground(r, s.streams, s.graph, s.now)]
    return solve(cands, DEFAULT_CONSTRAINTS)


# hint layouts over one box and two objects; truth picks one of them
layouts = st.lists(
    st.tuples(st.sampled_from(["o1", "o2"]), st.sampled_from(["o1", "o2"]), st.sampled_from(["near", "colour"])),
    min_size=1,
    max_size=4,
)


def build_samples(spec):
    out = []
    for i, (near, colour, pick) in enumerate(spec):
        truth = near if pick == "near" else colour
        out.append(sample([(f"b{i}", near)], [(f"b{i}", colour)], [(f"b{i}", truth)]))
    return out


def separable(rules, samples):
    grid = [0.1 * k for k in range(1, 31)]
    for wp, wc in itertools.product(grid, grid):
        weighted = [r.with_weight(wp if r.id == PROX else wc) for r in rules]
        if all(loss(answer_for(weighted, s), s.truth) == 0 for s in samples):
            return True
    return False


@settings(max_examples=30, deadline=None)
@given(layouts)
def test_converges_on_separable_sets(spec):
    rules = program()
    samples = build_samples(spec)
    result = train(rules, samples, lr=0.1, max_iters=200)
    if separable(rules, samples):
        assert result.converged
    if result.converged:
        assert all(loss(answer_for(result.apply(rules), s), s.truth) == 0 for s in samples)
    assert all(w >= MIN_WEIGHT for w in result.weights.values())
