"""Swarm membership, stream discovery, query fragmentation with COUNT pushdown, and merging."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

from .query_lang import (
    Aggregate,
    AggregateAs,
    Query,
    Select,
    expr_nodes,
    parse_query,
    serialize_ast,
)
from .rdfstar import (
    Iri,
    KnowledgeGraph,
    SemanticStream,
    Variable,
    graph_match,
    integer,
    iri,
    parse_term,
    parse_turtle_star,
    serialize_turtle_star,
)
from .ssr import evaluate, evaluate_select, order_rows, truthy

KINDS = ("RSU", "Edge", "Cloud")
TD_CONTEXT = "https://www.w3.org/2022/wot/td/v1.1"


class FederationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# membership


@dataclass(frozen=True)
class StreamInfo:
    uri: str
    content_type: str = "application/mp4"
    provenance: tuple = ()  # triples describing how the stream was generated


@dataclass(frozen=True)
class NodeDescriptor:
    id: str
    title: str = ""
    kind: str = "Edge"
    streams: tuple = ()
    reasoner: bool = True
    detector_fps: tuple = (0.0, 0.0)
    description: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise FederationError(f"unknown node kind {self.kind!r}")


@dataclass(frozen=True)
class Member:
    descriptor: NodeDescriptor
    role: str
    joined_at: int
    parent: str | None
    latency_ms: float = 0.0  # link to parent


@dataclass(frozen=True)
class Ack:
    node: str
    parent: str
    role: str
    joined_at: int


@dataclass
class SwarmState:
    coordinator: str
    members: dict = field(default_factory=dict)

    @classmethod
    def seed(cls, descriptor: NodeDescriptor, tick: int = 0) -> "SwarmState":
        return cls(descriptor.id, {descriptor.id: Member(descriptor, "coordinator", tick, None)})

    def copy(self) -> "SwarmState":
        return SwarmState(self.coordinator, dict(self.members))

    def parent(self, node: str) -> str | None:
        return self.members[node].parent

    def children(self, node: str) -> list[str]:
        return sorted(n for n, m in self.members.items() if m.parent == node)

    def path_to_root(self, node: str) -> list[str]:
        path = [node]
        seen = {node}
        while self.members[path[-1]].parent is not None:
            nxt = self.members[path[-1]].parent
            if nxt in seen:
                raise FederationError(f"cycle through {nxt}")
            seen.add(nxt)
            path.append(nxt)
        return path

    def is_tree(self) -> bool:
        try:
            return all(self.path_to_root(n)[-1] == self.coordinator for n in self.members)
        except (FederationError, KeyError):
            return False

    @property
    def catalog(self) -> KnowledgeGraph:
        """Provenance of every stream known to the coordinator."""
        g = KnowledgeGraph()
        for n in sorted(self.members):
            for s in self.members[n].descriptor.streams:
                g.update(s.provenance)
        return g

    def stream_owner(self) -> dict:
        return {s.uri: n for n in sorted(self.members) for s in self.members[n].descriptor.streams}


def subscribe(
    state: SwarmState, child: NodeDescriptor, parent: str, tick: int = 0, latency_ms: float = 0.0
) -> tuple[SwarmState, Ack]:
    """Admit ``child`` under ``parent``; returns a new state and the acknowledgement."""
    if child.id == parent:
        raise FederationError(f"subscribing {child.id} to itself would create a cycle")
    if child.id in state.members:
        raise FederationError(f"duplicate node id {child.id}")
    if parent not in state.members:
        raise FederationError(f"unknown parent {parent}")
    owners = state.stream_owner()
    clash = sorted(s.uri for s in child.streams if s.uri in owners)
    if clash:
        raise FederationError(f"stream {clash[0]} already provided by {owners[clash[0]]}")
    role = {"RSU": "stream", "Edge": "fog", "Cloud": "cloud"}[child.kind]
    new = state.copy()
    new.members[child.id] = Member(child, role, tick, parent, latency_ms)
    return new, Ack(child.id, parent, role, tick)


def unsubscribe(state: SwarmState, node: str) -> SwarmState:
    """Remove ``node``; its children move to its parent keeping their own link latency."""
    if node not in state.members:
        raise FederationError(f"unknown node {node}")
    if node == state.coordinator:
        raise FederationError("the coordinator cannot leave")
    grand = state.members[node].parent
    new = state.copy()
    del new.members[node]
    for n, m in state.members.items():
        if m.parent == node:
            new.members[n] = replace(m, parent=grand)
    return new


def discover(state: SwarmState, patterns: Sequence | Query, var: Variable | str = "streamURI") -> list[str]:
    """Stream uris whose provenance satisfies ``patterns`` (static triple patterns)."""
    if isinstance(patterns, Query):
        patterns = patterns.static_patterns
    if isinstance(var, str):
        var = Variable(var)
    graph = state.catalog
    bindings = [{}]
    for p in patterns:
        terms = p.terms() if hasattr(p, "terms") else p
        bindings = [b2 for b in bindings for b2 in graph_match(graph, terms, b)]
    known = set(state.stream_owner())
    found = {b[var].value for b in bindings if isinstance(b.get(var), Iri)}
    return sorted(found & known)


def propagate_timing(state: SwarmState, tick: int, period_ms: float = 1000.0) -> dict:
    """Time (ms) at which each node receives timing tick ``tick`` from the root."""
    out = {}
    for n in sorted(state.members):
        path = state.path_to_root(n)
        delay = sum(state.members[p].latency_ms for p in path[:-1])
        out[n] = tick * period_ms + delay
    return out


# ---------------------------------------------------------------------------
# wire format


def subscription_document(desc: NodeDescriptor, parent: str | None = None) -> str:
    """Thing-description style JSON with ``ssr:`` extension keys, on a single line."""
    forms = []
    for s in desc.streams:
        scheme = s.uri.split(":", 1)[0].upper() if ":" in s.uri else ""
        forms.append(
            {
                "op": "readproperty",
                "href": s.uri,
                "methodName": scheme,
                "contentType": s.content_type,
                "ssr:provenance": serialize_turtle_star(s.provenance, {}),
            }
        )
    doc = {
        "@context": TD_CONTEXT,
        "title": desc.title,
        "id": desc.id,
        "description": desc.description,
        "properties": {
            "status": {"description": "stream feed", "type": "string", "forms": forms, "readOnly": True}
        },
        "ssr:kind": desc.kind,
        "ssr:reasoner": desc.reasoner,
        "ssr:detectorFps": list(desc.detector_fps),
        "ssr:parent": parent,
    }
    return json.dumps(doc, separators=(",", ":"), ensure_ascii=False)


def parse_subscription_document(text: str) -> tuple[NodeDescriptor, str | None]:
    doc = json.loads(text)
    for key in ("@context", "title", "id"):
        if key not in doc:
            raise FederationError(f"subscription document lacks {key!r}")
    forms = doc.get("properties", {}).get("status", {}).get("forms", [])
    streams = tuple(
        StreamInfo(f["href"], f.get("contentType", ""), tuple(parse_turtle_star(f.get("ssr:provenance", ""), {})))
        for f in forms
    )
    desc = NodeDescriptor(
        doc["id"],
        doc["title"],
        doc.get("ssr:kind", "RSU"),
        streams,
        bool(doc.get("ssr:reasoner", False)),
        tuple(doc.get("ssr:detectorFps", (0.0, 0.0))),
        doc.get("description", ""),
    )
    return desc, doc.get("ssr:parent")


@dataclass(frozen=True)
class Message:
    type: str  # SUBSCRIBE | ACK | QUERY | PARTIAL | TICK
    sender: str
    receiver: str
    body: object

    def encode(self) -> str:
        return json.dumps(
            {"type": self.type, "from": self.sender, "to": self.receiver, "body": self.body},
            separators=(",", ":"),
            ensure_ascii=False,
        )

    @classmethod
    def decode(cls, line: str) -> "Message":
        d = json.loads(line)
        return cls(d["type"], d["from"], d["to"], d["body"])


def frame(payload: bytes) -> bytes:
    return struct.pack(">I", len(payload)) + payload


def unframe(buffer: bytes) -> tuple[list[bytes], bytes]:
    """Split complete length-prefixed frames off ``buffer``; returns (frames, remainder)."""
    out = []
    while len(buffer) >= 4:
        (n,) = struct.unpack(">I", buffer[:4])
        if len(buffer) < 4 + n:
            break
        out.append(buffer[4 : 4 + n])
        buffer = buffer[4 + n :]
    return out, buffer


# ---------------------------------------------------------------------------
# fragmentation


@dataclass(frozen=True)
class CountPartial:
    keys: tuple  # group-by variables
    counts: tuple  # (Aggregate, alias) pairs computed at the leaf


@dataclass(frozen=True)
class QueryFragment:
    id: str
    placement: str
    query: Query
    streams: tuple = ()
    partial: CountPartial | None = None
    parent: str | None = None

    @property
    def text(self) -> str:
        return serialize_ast(self.query)


@dataclass(frozen=True)
class Plan:
    query: Query
    root: QueryFragment
    leaves: tuple
    fallback: bool = False
    note: str = ""

    @property
    def fragments(self) -> list[QueryFragment]:
        return [self.root, *self.leaves]


def _needed_aggregates(q: Query) -> list[Aggregate]:
    found = [a.aggregate for a in q.aggregates()]
    if q.having is not None:
        found += [n for n in expr_nodes(q.having) if isinstance(n, Aggregate)]
    out = []
    for a in found:
        if a not in out:
            out.append(a)
    return out


def _leaf_query(q: Query) -> tuple[Query, CountPartial | None]:
    aggs = _needed_aggregates(q)
    if not aggs:
        return replace(q, order_by=None), None
    used = {v.name for v in q.group_by} | {a.alias.name for a in q.aggregates()}
    aliases = []
    for i in range(len(aggs)):
        name = f"partial{i}"
        while name in used:
            name += "_"
        used.add(name)
        aliases.append(Variable(name))
    items = tuple(q.group_by) + tuple(AggregateAs(a, v) for a, v in zip(aggs, aliases))
    leaf = replace(q, form=Select(items), having=None, order_by=None)
    return leaf, CountPartial(tuple(q.group_by), tuple(zip(aggs, aliases)))


def _sources(q: Query) -> set:
    return {b.source for b in (*q.stream_blocks, *q.naf_blocks)}


def placement_of(state: SwarmState, owner: str) -> str | None:
    """Lowest reasoner-capable node on the path from ``owner`` to the root."""
    for n in state.path_to_root(owner):
        if state.members[n].descriptor.reasoner:
            return n
    return None


def rewrite(query: Query, state: SwarmState) -> Plan:
    """Split ``query`` into per-node leaf fragments plus a root merge fragment."""
    if not query.is_select:
        raise FederationError("only SELECT queries are federated")
    for a in _needed_aggregates(query):
        if a.func != "COUNT" or a.distinct:
            raise FederationError(f"{a.func}{' DISTINCT' if a.distinct else ''} cannot be merged from partials")
    root_id = state.coordinator
    leaf, partial = _leaf_query(query)
    sources = _sources(query)
    if len(sources) != 1:
        root = QueryFragment("f0", root_id, query, tuple(sorted(state.stream_owner())))
        return Plan(query, root, (), True, "stream blocks over several sources are evaluated at the root")
    (source,) = sources
    uris = discover(state, query) if isinstance(source, Variable) else [source.value]
    owners = state.stream_owner()
    groups: dict = {}
    fallback = False
    for uri in uris:
        if uri not in owners:
            continue
        place = placement_of(state, owners[uri])
        if place is None:
            place, fallback = root_id, True
        groups.setdefault(place, []).append(uri)
    leaves = []
    for i, node in enumerate(sorted(n for n in groups if n != root_id), 1):
        leaves.append(QueryFragment(f"f{i}", node, leaf, tuple(groups[node]), partial, "f0"))
    root = QueryFragment("f0", root_id, query, tuple(groups.get(root_id, ())), partial)
    note = "no reasoner-capable node covers some streams; they run at the root" if fallback else ""
    return Plan(query, root, tuple(leaves), fallback, note)


# ---------------------------------------------------------------------------
# partial results


@dataclass(frozen=True)
class PartialResult:
    fragment_id: str
    watermark: int
    groups: Mapping = field(default_factory=dict)  # key tuple -> tuple of counts
    rows: tuple = ()  # used when the query has no aggregates

    def __post_init__(self):
        if any(c < 0 for counts in self.groups.values() for c in counts):
            raise FederationError("negative partial count")

    def to_message(self, sender: str, receiver: str) -> Message:
        groups = [[[t.n3() for t in k], list(c)] for k, c in sorted(self.groups.items(), key=lambda kv: [t.n3() for t in kv[0]])]
        rows = [[None if t is None else t.n3() for t in r] for r in self.rows]
        body = {"fragment": self.fragment_id, "watermark": self.watermark, "groups": groups, "rows": rows}
        return Message("PARTIAL", sender, receiver, body)

    @classmethod
    def from_message(cls, msg: Message) -> "PartialResult":
        b = msg.body
        groups = {tuple(parse_term(t, {}) for t in k): tuple(c) for k, c in b["groups"]}
        rows = tuple(tuple(None if t is None else parse_term(t, {}) for t in r) for r in b["rows"])
        return cls(b["fragment"], b["watermark"], groups, rows)


def _to_int(term) -> int:
    return int(term.lexical)


def partial_from_rows(fragment: QueryFragment, rows: Sequence[tuple], watermark: int) -> PartialResult:
    if fragment.partial is None:
        return PartialResult(fragment.id, watermark, {}, tuple(rows))
    k = len(fragment.partial.keys)
    groups = {tuple(r[:k]): tuple(_to_int(t) for t in r[k:]) for r in rows}
    return PartialResult(fragment.id, watermark, groups)


def merge_partials(
    partials: Sequence[PartialResult],
    having=None,
    order_by=None,
    *,
    partial: CountPartial | None = None,
    projection: Sequence | None = None,
) -> list[tuple]:
    """Sum per-group counts, then apply HAVING and ORDER BY.

    With no ``partial`` description a single count per group is assumed and
    rows are ``(*key, count)``; variables in HAVING/ORDER BY then refer to
    ``?count`` and the key positions ``?key0``.. .
    """
    if not partials:
        return []
    marks = {p.watermark for p in partials}
    if len(marks) != 1:
        raise FederationError(f"partials from different window instances: {sorted(marks)}")
    if partial is None:
        width = {len(k) for p in partials for k in p.groups}
        n = width.pop() if width else 0
        partial = CountPartial(
            tuple(Variable(f"key{i}") for i in range(n)), ((Aggregate("COUNT", None), Variable("count")),)
        )
        projection = projection or tuple(partial.keys) + (Variable("count"),)
    if projection is None:
        projection = tuple(partial.keys) + tuple(alias for _, alias in partial.counts)
    totals: dict = {}
    for p in partials:
        for key, counts in p.groups.items():
            prev = totals.get(key, (0,) * len(counts))
            totals[key] = tuple(a + b for a, b in zip(prev, counts))
    names = [i if isinstance(i, Variable) else i.alias for i in projection]
    rows = []
    for key, counts in totals.items():
        values = {agg: integer(c) for (agg, _), c in zip(partial.counts, counts)}
        env = dict(zip(partial.keys, key))
        for (agg, alias), c in zip(partial.counts, counts):
            env[alias] = integer(c)
        for item in projection:
            if isinstance(item, AggregateAs):
                env[item.alias] = values[item.aggregate]
        if having is not None and not truthy(evaluate(having, env, None, values)):
            continue
        rows.append(tuple(env.get(v) for v in names))
    return order_rows(rows, names, order_by)


def merge_rows(partials: Sequence[PartialResult], query: Query) -> list[tuple]:
    """Union of leaf rows for an aggregate-free query."""
    if not partials:
        return []
    if len({p.watermark for p in partials}) != 1:
        raise FederationError("partials from different window instances")
    names = [i for i in query.form.items]
    rows = [r for p in partials for r in p.rows]
    if query.form.distinct:
        rows = list({tuple(t.n3() if t else "" for t in r): r for r in rows}.values())
    return order_rows(rows, names, query.order_by)


# ---------------------------------------------------------------------------
# execution


def local_catalog(state: SwarmState, uris: Sequence[str]) -> KnowledgeGraph:
    wanted = set(uris)
    g = KnowledgeGraph()
    for m in state.members.values():
        for s in m.descriptor.streams:
            if s.uri in wanted:
                g.update(s.provenance)
    return g


def _run_fragment(frag: QueryFragment, query: Query, state, streams, now, tps) -> PartialResult:
    uris = [u for u in frag.streams if Iri(u) in streams]
    local = {Iri(u): streams[Iri(u)] for u in uris}
    rows = evaluate_select(query, local, local_catalog(state, frag.streams), now, ticks_per_second=tps)
    return partial_from_rows(frag, rows, now)


def execute_federated(
    query: Query,
    state: SwarmState,
    streams: Mapping[Iri, SemanticStream],
    now: int,
    *,
    ticks_per_second: float = 1.0,
    plan: Plan | None = None,
) -> list[tuple]:
    """Run leaves from their wire text, ship partials as messages, merge at the root."""
    plan = plan or rewrite(query, state)
    if plan.fallback and not plan.leaves and len(_sources(query)) != 1:
        return evaluate_select(query, streams, state.catalog, now, ticks_per_second=ticks_per_second)
    leaf_query, partial = _leaf_query(query)
    partials = []
    for frag in plan.leaves:
        q = parse_query(frag.text)
        msg = _run_fragment(frag, q, state, streams, now, ticks_per_second).to_message(frag.placement, plan.root.placement)
        partials.append(PartialResult.from_message(Message.decode(msg.encode())))
    if plan.root.streams or not plan.leaves:
        partials.append(_run_fragment(replace(plan.root, partial=partial), leaf_query, state, streams, now, ticks_per_second))
    if partial is None:
        return merge_rows(partials, query)
    return merge_partials(partials, query.having, query.order_by, partial=partial, projection=query.form.items)


def execute_centralized(
    query: Query, state: SwarmState, streams: Mapping[Iri, SemanticStream], now: int, *, ticks_per_second: float = 1.0
) -> list[tuple]:
    return evaluate_select(query, streams, state.catalog, now, ticks_per_second=ticks_per_second)


# ---------------------------------------------------------------------------
# synthetic traffic swarm


def camera_stream(uri: str, sensor: str, kind: str = ":TrafficCamera") -> StreamInfo:
    prov = (
        (Iri(uri), iri("prov:wasGeneratedBy"), iri(sensor)),
        (iri(sensor), iri("a"), iri(kind)),
    )
    return StreamInfo(uri, "application/mp4", prov)


def traffic_swarm(
    n_edges: int,
    n_streams: int,
    *,
    edge_reasoners: bool = True,
    extra_streams: int = 0,
    rsu_edge_ms: float = 2.0,
    edge_cloud_ms: float = 10.0,
) -> SwarmState:
    """Cloud coordinator, ``n_edges`` edges, one RSU per stream assigned round-robin.

    ``extra_streams`` adds weather-station streams that camera discovery must skip.
    """
    if n_edges < 1:
        raise ValueError("need at least one edge")
    state = SwarmState.seed(NodeDescriptor("urn:thoth:cloud", "cloud", "Cloud", reasoner=True))
    for e in range(n_edges):
        desc = NodeDescriptor(f"urn:thoth:edge{e}", f"edge{e}", "Edge", reasoner=edge_reasoners)
        state, _ = subscribe(state, desc, state.coordinator, latency_ms=edge_cloud_ms)
    for s in range(n_streams + extra_streams):
        if s < n_streams:
            info = camera_stream(f"rtsp://thoth.example.org/camera/{s}", f":rig{s}")
        else:
            info = camera_stream(f"http://thoth.example.org/weather/{s}", f":station{s}", ":WeatherStation")
        rsu = NodeDescriptor(f"urn:thoth:rsu{s}", f"rsu{s}", "RSU", (info,), reasoner=False)
        state, _ = subscribe(state, rsu, f"urn:thoth:edge{s % n_edges}", latency_ms=rsu_edge_ms)
    return state


def truck_events(
    state: SwarmState, rng, now: int, *, cameras: int | None = None, max_events: int = 6, horizon: int = 600
) -> dict:
    """Random truck sightings on every stream, some older than a 5 minute window."""
    uris = sorted(state.stream_owner())
    cameras = cameras or max(1, len(uris) // 2)
    streams = {}
    serial = 0
    for uri in uris:
        stream = SemanticStream(Iri(uri))
        times = sorted(int(t) for t in rng.integers(max(0, now - horizon), now + 1, size=int(rng.integers(0, max_events + 1))))
        for t in times:
            serial += 1
            cam = iri(f":cam{int(rng.integers(cameras))}")
            obs, frame, truck = iri(f":obs{serial}"), iri(f":frame{serial}"), iri(f":truck{serial}")
            stream.extend(
                [
                    (cam, iri("a"), iri("ssr:Camera")),
                    (cam, iri("sosa:madeObservation"), obs),
                    (obs, iri("sosa:hasResult"), frame),
                    (obs, iri("sosa:resultTime"), integer(t)),
                    (truck, iri("a"), iri(":Truck")),
                    (truck, iri("ssr:detectedIn"), frame),
                ],
                t,
            )
        streams[Iri(uri)] = stream
    return streams
