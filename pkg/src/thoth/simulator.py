"""Discrete-event simulation of camera swarms: device-cloud (DC) vs device-edge-cloud (DEC)."""

from __future__ import annotations

import csv
import heapq
import io
import itertools
from collections import deque
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .federation import (
    NodeDescriptor,
    SwarmState,
    camera_stream,
    placement_of,
    propagate_timing,
    rewrite,
    subscribe,
)
from .query_lang import parse_query

DEFAULT_QUERY = """
SELECT ?camera (COUNT(?truck) AS ?truckCount)
WHERE {
  STREAM ?streamURI [RANGE 5m ON sosa:resultTime] {
    ?camera a ssr:Camera ; sosa:madeObservation ?obs .
    ?obs sosa:hasResult ?vFrame .
    ?truck a :Truck ; ssr:detectedIn ?vFrame .
  }
  ?streamURI prov:wasGeneratedBy/a :TrafficCamera .
}
GROUP BY ?camera
HAVING (COUNT(?truck) > 1)
ORDER BY ?truckCount
"""

CSV_COLUMNS = ("topology", "num_cameras", "mean_delay_ms", "p95_delay_ms", "drop_rate")
CLOUD = "urn:thoth:cloud"
POLICIES = ("drop-newest", "drop-oldest", "queue")


@dataclass
class ScenarioConfig:
    topology: str = "DEC"
    num_cameras: int = 8
    fps_per_camera: float = 10.0
    cloud_fps: float = 175.0
    edge_fps: float = 17.5
    num_edges: int = 8
    link_latency_rsu_edge: float = 2.0
    link_latency_edge_cloud: float = 20.0
    link_latency_rsu_cloud: float = 22.0
    reasoning_ms: float = 6.0
    merge_ms: float = 0.5
    frame_policy: str = "drop-newest"  # drop-newest | drop-oldest | queue
    queue_capacity: int = 0  # 0: one slot per camera served by the node
    phase_jitter_ms: float = 0.0
    sim_duration: int = 20000  # virtual ms
    seed: int = 0

    def validate(self) -> None:
        if self.topology not in ("DC", "DEC"):
            raise ValueError(f"topology must be DC or DEC, not {self.topology!r}")
        if self.num_cameras < 1 or self.num_cameras > 40:
            raise ValueError("num_cameras must lie in 1..40")
        if self.num_edges < 1:
            raise ValueError("num_edges must be >= 1")
        for name in ("fps_per_camera", "cloud_fps", "edge_fps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("link_latency_rsu_edge", "link_latency_edge_cloud", "link_latency_rsu_cloud",
                     "reasoning_ms", "merge_ms", "phase_jitter_ms"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.frame_policy not in POLICIES:
            raise ValueError(f"frame_policy must be one of {', '.join(POLICIES)}")
        if self.sim_duration <= 0:
            raise ValueError("sim_duration must be positive")


def load_scenario(path: str | Path, **overrides) -> ScenarioConfig:
    """Read ``key = value`` lines (``#`` comments) into a ScenarioConfig."""
    types = {f.name: f.type for f in fields(ScenarioConfig)}
    values = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
        kind = types[key]
        values[key] = int(value) if kind == "int" else float(value) if kind == "float" else value
    values.update({k: v for k, v in overrides.items() if v is not None})
    cfg = ScenarioConfig(**values)
    cfg.validate()
    return cfg


# ---------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class NodeSpec:
    id: str
    kind: str
    fps: float
    parent: str | None
    latency_ms: float
    cameras: tuple = ()


def build_topology(cfg: ScenarioConfig) -> tuple[SwarmState, dict]:
    """Swarm membership plus a node table; cameras go round-robin over edges."""
    cfg.validate()
    state = SwarmState.seed(NodeDescriptor(CLOUD, "cloud", "Cloud", reasoner=True, detector_fps=(100.0, 250.0)))
    nodes = {CLOUD: NodeSpec(CLOUD, "Cloud", cfg.cloud_fps, None, 0.0)}
    edges = []
    if cfg.topology == "DEC":
        for e in range(min(cfg.num_edges, cfg.num_cameras)):
            eid = f"urn:thoth:edge{e}"
            desc = NodeDescriptor(eid, f"edge{e}", "Edge", reasoner=True, detector_fps=(10.0, 25.0))
            state, _ = subscribe(state, desc, CLOUD, latency_ms=cfg.link_latency_edge_cloud)
            edges.append(eid)
    cams: dict = {}
    for c in range(cfg.num_cameras):
        parent = edges[c % len(edges)] if edges else CLOUD
        lat = cfg.link_latency_rsu_edge if edges else cfg.link_latency_rsu_cloud
        info = camera_stream(f"rtsp://thoth.example.org/camera/{c}", f":rig{c}")
        rid = f"urn:thoth:rsu{c}"
        state, _ = subscribe(state, NodeDescriptor(rid, f"rsu{c}", "RSU", (info,), reasoner=False), parent, latency_ms=lat)
        nodes[rid] = NodeSpec(rid, "RSU", 0.0, parent, lat)
        cams.setdefault(parent, []).append(c)
    for eid in edges:
        nodes[eid] = NodeSpec(eid, "Edge", cfg.edge_fps, CLOUD, cfg.link_latency_edge_cloud, tuple(cams.get(eid, ())))
    nodes[CLOUD] = replace(nodes[CLOUD], cameras=tuple(cams.get(CLOUD, ())))
    return state, nodes


# ---------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    topology: str = ""
    num_cameras: int = 0
    delays: list = field(default_factory=list)
    generated: int = 0
    delivered: int = 0
    dropped: int = 0
    in_flight: int = 0
    utilization: dict = field(default_factory=dict)
    min_path_ms: float = 0.0

    @property
    def mean_delay(self) -> float:
        return float(np.mean(self.delays)) if self.delays else float("nan")

    @property
    def median_delay(self) -> float:
        return float(np.median(self.delays)) if self.delays else float("nan")

    @property
    def p95_delay(self) -> float:
        return float(np.percentile(self.delays, 95)) if self.delays else float("nan")

    @property
    def drop_rate(self) -> float:
        return self.dropped / self.generated if self.generated else 0.0


def summarize(runs) -> list[tuple]:
    rows = []
    for m in runs:
        rows.append((m.topology, str(m.num_cameras), f"{m.mean_delay:.3f}", f"{m.p95_delay:.3f}", f"{m.drop_rate:.4f}"))
    return rows


def emit_csv(runs, path: str | Path | None = None) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    w.writerows(summarize(runs))
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


# ---------------------------------------------------------------------------
# event loop

FRAME_ARRIVAL, SERVICE_START, SERVICE_END, MESSAGE_DELIVERY, TIMING_TICK = (
    "FrameArrival", "ServiceStart", "ServiceEnd", "MessageDelivery", "TimingTick",
)


@dataclass(order=True)
class Event:
    time: float
    seq: int
    kind: str = field(compare=False)
    node: str = field(compare=False)
    payload: object = field(compare=False, default=None)


class EventQueue:
    """Min-heap on time with FIFO order among equal times."""

    def __init__(self):
        self._heap: list = []
        self._seq = itertools.count()

    def push(self, time: float, kind: str, node: str, payload=None) -> None:
        heapq.heappush(self._heap, Event(time, next(self._seq), kind, node, payload))

    def pop(self) -> Event:
        return heapq.heappop(self._heap)

    def peek_time(self) -> float:
        return self._heap[0].time

    def __len__(self) -> int:
        return len(self._heap)


@dataclass
class _Server:
    service_ms: float
    capacity: int | None
    policy: str = "drop-newest"
    queue: deque = field(default_factory=deque)
    busy_until: float | None = None
    busy_since: float = 0.0
    busy_total: float = 0.0


def _path_latency(nodes: dict, start: str, stop: str) -> float:
    total, n = 0.0, start
    while n != stop:
        total += nodes[n].latency_ms
        n = nodes[n].parent
    return total


def placements(cfg: ScenarioConfig, state: SwarmState, query_text: str = DEFAULT_QUERY) -> dict:
    """Camera index -> node hosting its detection and reasoning fragment."""
    plan = rewrite(parse_query(query_text), state)
    where = {}
    for frag in plan.fragments:
        for uri in frag.streams:
            where[int(uri.rsplit("/", 1)[-1])] = frag.placement
    for c in range(cfg.num_cameras):
        if c not in where:
            where[c] = placement_of(state, f"urn:thoth:rsu{c}") or state.coordinator
    return where


def run_simulation(cfg: ScenarioConfig, query_text: str = DEFAULT_QUERY, log: list | None = None) -> Metrics:
    """Simulate ``cfg.sim_duration`` virtual ms; ``log`` collects processed events if given."""
    cfg.validate()
    state, nodes = build_topology(cfg)
    where = placements(cfg, state, query_text)
    rng = np.random.default_rng(cfg.seed)
    period = 1000.0 / cfg.fps_per_camera
    timing = propagate_timing(state, 0, period)
    servers = {}
    for c, n in sorted(where.items()):
        if n not in servers:
            fps = nodes[n].fps
            k = cfg.queue_capacity or sum(1 for m in where.values() if m == n)
            servers[n] = _Server(1000.0 / fps + cfg.reasoning_ms, None if cfg.frame_policy == "queue" else k, cfg.frame_policy)
    m = Metrics(cfg.topology, cfg.num_cameras)
    m.min_path_ms = min(_path_latency(nodes, f"urn:thoth:rsu{c}", CLOUD) for c in range(cfg.num_cameras))
    q = EventQueue()
    end = float(cfg.sim_duration)
    for c in range(cfg.num_cameras):
        jitter = float(rng.uniform(0.0, cfg.phase_jitter_ms)) if cfg.phase_jitter_ms > 0 else 0.0
        q.push(timing[f"urn:thoth:rsu{c}"] + jitter, TIMING_TICK, f"urn:thoth:rsu{c}", c)

    def start(node: str, now: float) -> None:
        srv = servers[node]
        if srv.busy_until is None and srv.queue:
            frame = srv.queue.popleft()
            srv.busy_until = now + srv.service_ms
            srv.busy_since = now
            q.push(now, SERVICE_START, node, frame)
            q.push(srv.busy_until, SERVICE_END, node, frame)

    while len(q) and q.peek_time() <= end:
        ev = q.pop()
        if log is not None:
            log.append(ev)
        if ev.kind == TIMING_TICK:
            c = ev.payload
            m.generated += 1
            host = where[c]
            q.push(ev.time + _path_latency(nodes, ev.node, host), FRAME_ARRIVAL, host, (c, ev.time))
            if ev.time + period < end:
                q.push(ev.time + period, TIMING_TICK, ev.node, c)
        elif ev.kind == FRAME_ARRIVAL:
            srv = servers[ev.node]
            if srv.capacity is not None and len(srv.queue) >= srv.capacity:
                m.dropped += 1
                if srv.policy == "drop-newest":
                    continue
                srv.queue.popleft()
            srv.queue.append(ev.payload)
            start(ev.node, ev.time)
        elif ev.kind == SERVICE_END:
            srv = servers[ev.node]
            srv.busy_total += ev.time - srv.busy_since
            srv.busy_until = None
            hop = 0.0 if ev.node == CLOUD else _path_latency(nodes, ev.node, CLOUD)
            q.push(ev.time + hop + cfg.merge_ms, MESSAGE_DELIVERY, CLOUD, ev.payload)
            start(ev.node, ev.time)
        elif ev.kind == MESSAGE_DELIVERY:
            _, born = ev.payload
            m.delivered += 1
            m.delays.append(ev.time - born)
    m.in_flight = m.generated - m.delivered - m.dropped
    for n, srv in sorted(servers.items()):
        busy = srv.busy_total + (end - srv.busy_since if srv.busy_until is not None else 0.0)
        m.utilization[n] = min(1.0, busy / end)
    return m


def sweep(cfg: ScenarioConfig, cameras=(8, 16, 24, 32, 40), topologies=("DC", "DEC")) -> list[Metrics]:
    return [run_simulation(replace(cfg, topology=t, num_cameras=n)) for t in topologies for n in cameras]


def calibrate(cfg: ScenarioConfig, dc_target_ms: float = 50.0, dec_target_ms: float = 135.0, n: int = 8) -> ScenarioConfig:
    """Fit the RSU-cloud and edge-cloud latencies so the ``n``-camera means hit the targets.

    Without link contention the mean delay shifts one-for-one with either latency,
    so a single probe run at zero latency per topology suffices.
    """
    dc0 = run_simulation(replace(cfg, topology="DC", num_cameras=n, link_latency_rsu_cloud=0.0)).mean_delay
    dec0 = run_simulation(replace(cfg, topology="DEC", num_cameras=n, link_latency_edge_cloud=0.0)).mean_delay
    return replace(
        cfg,
        link_latency_rsu_cloud=round(max(0.0, dc_target_ms - dc0), 3),
        link_latency_edge_cloud=round(max(0.0, dec_target_ms - dec0), 3),
    )
