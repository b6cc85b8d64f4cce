import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus
from thoth.federation import (
    CountPartial,
    FederationError,
    Message,
    NodeDescriptor,
    PartialResult,
    StreamInfo,
    SwarmState,
    camera_stream,
    discover,
    execute_centralized,
    execute_federated,
    frame,
    merge_partials,
    parse_subscription_document,
    propagate_timing,
    rewrite,
    subscribe,
    subscription_document,
    traffic_swarm,
    truck_events,
    unframe,
    unsubscribe,
)
from thoth.query_lang import Aggregate, parse_query
from thoth.rdfstar import Iri, Variable, integer, iri, string

CLOUD = "urn:thoth:cloud"


def truck_query():
    return parse_query(corpus("queries", "positive", "truck_count.rq").read_text())


def root():
    return SwarmState.seed(NodeDescriptor(CLOUD, "cloud", "Cloud"))


def helsinki_camera():
    prov = ((Iri("RTSP://helsinki.fi/camera/2"), iri("prov:wasGeneratedBy"), iri(":cam2")),)
    return NodeDescriptor(
        "urn:uuid:9489991a-7622-45b6-8437-f859835d4",
        "Camera2-At-Helsinki",
        "RSU",
        (StreamInfo("RTSP://helsinki.fi/camera/2", "application/mp4", prov),),
        reasoner=False,
        description="Traffic Camera at Junction....",
    )


# -- membership ---------------------------------------------------------------


def test_subscribe_acknowledges_camera():
    state, ack = subscribe(root(), helsinki_camera(), CLOUD, tick=4)
    assert ack.parent == CLOUD and ack.role == "stream" and ack.joined_at == 4
    assert state.stream_owner() == {"RTSP://helsinki.fi/camera/2": helsinki_camera().id}
    assert state.is_tree()


def test_subscribe_does_not_mutate_input():
    base = root()
    subscribe(base, helsinki_camera(), CLOUD)
    assert list(base.members) == [CLOUD]


def test_subscribe_rejections():
    state, _ = subscribe(root(), helsinki_camera(), CLOUD)
    with pytest.raises(FederationError, match="cycle"):
        subscribe(state, NodeDescriptor("x", kind="Edge"), "x")
    with pytest.raises(FederationError, match="duplicate"):
        subscribe(state, helsinki_camera(), CLOUD)
    with pytest.raises(FederationError, match="unknown parent"):
        subscribe(state, NodeDescriptor("y", kind="Edge"), "nowhere")
    clone = NodeDescriptor("z", kind="RSU", streams=helsinki_camera().streams)
    with pytest.raises(FederationError, match="already provided"):
        subscribe(state, clone, CLOUD)


def test_unknown_kind():
    with pytest.raises(FederationError):
        NodeDescriptor("n", kind="Satellite")


def test_unsubscribe_reparents_children():
    state = traffic_swarm(2, 4)
    state = unsubscribe(state, "urn:thoth:edge0")
    assert state.parent("urn:thoth:rsu0") == CLOUD
    assert state.is_tree()
    with pytest.raises(FederationError):
        unsubscribe(state, CLOUD)


ops = st.lists(st.tuples(st.booleans(), st.integers(0, 30), st.integers(0, 30)), max_size=40)


@settings(max_examples=80, deadline=None)
@given(ops)
def test_membership_stays_a_tree(script):
    state = root()
    for join, a, b in script:
        names = sorted(state.members)
        if join:
            parent = names[b % len(names)]
            try:
                state, _ = subscribe(state, NodeDescriptor(f"n{a}", kind="Edge"), parent)
            except FederationError:
                pass
        else:
            try:
                state = unsubscribe(state, f"n{a}")
            except FederationError:
                pass
        assert state.is_tree()
        assert state.members[state.coordinator].parent is None


# -- discovery ----------------------------------------------------------------


def test_discover_forty_cameras():
    state = traffic_swarm(8, 40)
    found = discover(state, truck_query())
    assert len(found) == 40


def test_discover_nothing():
    state = traffic_swarm(2, 0, extra_streams=3)
    assert discover(state, truck_query()) == []


def test_discover_skips_other_sensors():
    state = traffic_swarm(2, 5, extra_streams=5)
    found = discover(state, truck_query())
    assert len(found) == 5
    assert all("camera" in u for u in found)


# -- rewriting ----------------------------------------------------------------


def test_rewrite_decentralised():
    plan = rewrite(truck_query(), traffic_swarm(8, 40))
    assert len(plan.leaves) == 8 and not plan.fallback
    assert {f.placement for f in plan.leaves} == {f"urn:thoth:edge{i}" for i in range(8)}
    assert all(len(f.streams) == 5 for f in plan.leaves)
    leaf = parse_query(plan.leaves[0].text)
    assert leaf.having is None and leaf.order_by is None
    assert [i.aggregate.func for i in leaf.aggregates()] == ["COUNT"]


def test_rewrite_centralised_is_single_fragment():
    plan = rewrite(truck_query(), traffic_swarm(8, 40, edge_reasoners=False))
    assert plan.leaves == ()
    assert len(plan.fragments) == 1
    assert len(plan.root.streams) == 40


def test_rewrite_rejects_unmergeable():
    state = traffic_swarm(2, 2)
    for agg in ("SUM(?truck)", "COUNT(DISTINCT ?truck)"):
        q = parse_query(
            f"SELECT ?camera ({agg} AS ?n) WHERE {{ STREAM ?streamURI window[5 min] {{ ?camera :saw ?truck . }} "
            "?streamURI prov:wasGeneratedBy/a :TrafficCamera . } GROUP BY ?camera"
        )
        with pytest.raises(FederationError):
            rewrite(q, state)
    construct = parse_query("CONSTRUCT { ?a :p ?b . } WHERE { STREAM <:s> { ?a :p ?b . } }")
    with pytest.raises(FederationError):
        rewrite(construct, state)


def test_aggregate_free_query_is_a_union():
    q = parse_query(
        "SELECT ?truck WHERE { STREAM ?streamURI window[5 min] { ?truck a :Truck . } "
        "?streamURI prov:wasGeneratedBy/a :TrafficCamera . } ORDER BY ?truck"
    )
    state = traffic_swarm(3, 6)
    streams = truck_events(state, np.random.default_rng(0), 1000)
    fed = execute_federated(q, state, streams, 1000)
    assert fed == execute_centralized(q, state, streams, 1000)
    assert len(fed) == sum(
        1 for s in streams.values() for e in s.elements if e.triple[2] == iri(":Truck") and 700 < e.timestamp <= 1000
    )


# -- merging ------------------------------------------------------------------


def test_merge_sums_counts_per_key():
    cam_a = iri(":camA")
    p1 = PartialResult("f1", 10, {(cam_a,): (1,)})
    p2 = PartialResult("f2", 10, {(cam_a,): (2,)})
    assert merge_partials([p1, p2]) == [(cam_a, integer(3))]


def test_merge_empty():
    assert merge_partials([]) == []
    assert merge_partials([PartialResult("f1", 1, {})]) == []


def test_merge_rejects_mixed_watermarks():
    with pytest.raises(FederationError):
        merge_partials([PartialResult("f1", 1, {}), PartialResult("f2", 2, {})])


def test_merge_applies_having_and_order():
    q = truck_query()
    count = Aggregate("COUNT", Variable("truck"))
    partial = CountPartial((Variable("camera"),), ((count, Variable("partial0")),))
    a, b, c = iri(":a"), iri(":b"), iri(":c")
    parts = [
        PartialResult("f1", 0, {(a,): (3,), (b,): (1,)}),
        PartialResult("f2", 0, {(b,): (1,), (c,): (1,)}),
    ]
    rows = merge_partials(parts, q.having, q.order_by, partial=partial, projection=q.form.items)
    assert rows == [(b, integer(2)), (a, integer(3))]


def test_negative_partial_rejected():
    with pytest.raises(FederationError):
        PartialResult("f1", 0, {(iri(":a"),): (-1,)})


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5), st.integers(0, 12))
def test_federated_equals_centralised(seed, edges, cameras):
    state = traffic_swarm(edges, cameras, extra_streams=1)
    rng = np.random.default_rng(seed)
    streams = truck_events(state, rng, 1000)
    q = truck_query()
    assert execute_federated(q, state, streams, 1000) == execute_centralized(q, state, streams, 1000)


# -- timing -------------------------------------------------------------------


def test_timing_sums_link_latencies():
    state = traffic_swarm(2, 2, rsu_edge_ms=2.0, edge_cloud_ms=13.0)
    t = propagate_timing(state, 3, period_ms=100)
    assert t[CLOUD] == 300
    assert t["urn:thoth:edge0"] == 313
    assert t["urn:thoth:rsu1"] == 315


def test_timing_single_node():
    assert propagate_timing(root(), 0) == {CLOUD: 0}


# -- wire format --------------------------------------------------------------


def test_subscription_document_round_trip():
    desc = helsinki_camera()
    text = subscription_document(desc, CLOUD)
    assert "\n" not in text
    assert '"methodName":"RTSP"' in text
    assert text.startswith('{"@context":"https://www.w3.org/2022/wot/td/v1.1","title":"Camera2-At-Helsinki"')
    back, parent = parse_subscription_document(text)
    assert back == desc and parent == CLOUD


def test_subscription_document_requires_id():
    with pytest.raises(FederationError):
        parse_subscription_document('{"@context":"x","title":"t"}')


def test_partial_message_round_trip():
    key = (iri(":camA"), string("x"))
    p = PartialResult("f3", 42, {key: (5, 1)}, ())
    msg = Message.decode(p.to_message("edge", "cloud").encode())
    assert msg.type == "PARTIAL" and msg.sender == "edge" and msg.receiver == "cloud"
    assert PartialResult.from_message(msg) == p


def test_framing():
    msgs = [Message("TICK", "a", "b", i).encode().encode() for i in range(3)]
    buf = b"".join(frame(m) for m in msgs)
    got, rest = unframe(buf[:-2])
    assert got == msgs[:2] and rest == frame(msgs[2])[:-2]
    got, rest = unframe(buf)
    assert got == msgs and rest == b""


def test_camera_stream_provenance():
    info = camera_stream("rtsp://x/1", ":rig")
    assert (Iri("rtsp://x/1"), iri("prov:wasGeneratedBy"), iri(":rig")) in info.provenance
