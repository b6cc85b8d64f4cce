"""Tracking-by-detection emulated with reasoning rules.

Geometry and Kalman filtering are plain numpy; association is decided by the
rule program through :func:`thoth.ssr.evaluate_tick`, with ``iou`` and
``appDist`` exposed to rule filters as builtins.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .query_lang import Rule
from .rdfstar import (
    Iri,
    KnowledgeGraph,
    QuotedTriple,
    SemanticStream,
    iri,
    integer,
    string,
)
from .ssr import DEFAULT_CONSTRAINTS, SOSA_IS_SAMPLE_OF, evaluate_tick

A = iri("a")
NS = ":"


# ---------------------------------------------------------------------------
# geometry


@dataclass(frozen=True)
class BoundingBox:
    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError("box width and height must be positive")

    @property
    def area(self) -> float:
        return self.w * self.h

    def to_z(self) -> np.ndarray:
        """Measurement vector (cx, cy, area, aspect)."""
        return np.array([self.x + self.w / 2, self.y + self.h / 2, self.w * self.h, self.w / self.h], dtype=float)

    @classmethod
    def from_z(cls, z) -> "BoundingBox":
        cx, cy, s, r = (float(v) for v in z[:4])
        s = max(s, 1e-9)
        r = max(r, 1e-9)
        w = math.sqrt(s * r)
        h = s / w
        return cls(cx - w / 2, cy - h / 2, w, h)


def iou(b1: BoundingBox, b2: BoundingBox) -> float:
    ix = max(0.0, min(b1.x + b1.w, b2.x + b2.w) - max(b1.x, b2.x))
    iy = max(0.0, min(b1.y + b1.h, b2.y + b2.h) - max(b1.y, b2.y))
    inter = ix * iy
    union = b1.area + b2.area - inter
    return inter / union if union > 0 else 0.0


def appearance_distance(d1, d2) -> float:
    """(1 - cosine similarity) / 2, so identical -> 0, opposite -> 1."""
    a = np.asarray(d1, dtype=float)
    b = np.asarray(d2, dtype=float)
    if a.shape != b.shape:
        raise ValueError("descriptor lengths differ")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("zero-norm descriptor")
    cos = float(np.dot(a, b) / (na * nb))
    return min(1.0, max(0.0, (1.0 - cos) / 2.0))


# ---------------------------------------------------------------------------
# Kalman filter (constant velocity in cx, cy, area; constant aspect)

F = np.eye(7)
F[0, 4] = F[1, 5] = F[2, 6] = 1.0
H = np.zeros((4, 7))
H[:4, :4] = np.eye(4)
DEFAULT_R = np.diag([1.0, 1.0, 10.0, 10.0])
DEFAULT_Q = np.diag([1.0, 1.0, 1.0, 1.0, 0.01, 0.01, 0.0001])
DEFAULT_P0 = np.diag([10.0, 10.0, 10.0, 10.0, 1e4, 1e4, 1e4])


@dataclass(frozen=True)
class KalmanState:
    mean: np.ndarray
    covariance: np.ndarray

    @classmethod
    def from_box(cls, box: BoundingBox, p0: np.ndarray = DEFAULT_P0) -> "KalmanState":
        mean = np.zeros(7)
        mean[:4] = box.to_z()
        return cls(mean, p0.copy())

    def box(self) -> BoundingBox:
        return BoundingBox.from_z(self.mean)


def _sym(p: np.ndarray) -> np.ndarray:
    return (p + p.T) / 2.0


def kf_predict(state: KalmanState, dt: int = 1, q: np.ndarray = DEFAULT_Q) -> KalmanState:
    if dt < 1:
        raise ValueError("dt must be >= 1")
    x = state.mean.copy()
    p = state.covariance.copy()
    for _ in range(int(dt)):
        if x[2] + x[6] <= 0:
            x[6] = 0.0
        x = F @ x
        p = _sym(F @ p @ F.T + q)
    return KalmanState(x, p)


def kf_update(state: KalmanState, box: BoundingBox, r: np.ndarray = DEFAULT_R) -> KalmanState:
    z = box.to_z()
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(state.mean)) and np.all(np.isfinite(state.covariance))):
        raise ValueError("non-finite Kalman input")
    p = state.covariance
    s = H @ p @ H.T + r
    k = np.linalg.solve(s.T, (p @ H.T).T).T
    x = state.mean + k @ (z - H @ state.mean)
    ikh = np.eye(7) - k @ H
    p_new = _sym(ikh @ p @ ikh.T + k @ r @ k.T)
    return KalmanState(x, p_new)


# ---------------------------------------------------------------------------
# detections and their symbolic form


@dataclass(frozen=True)
class DetectionRecord:
    frame: int
    box: BoundingBox
    label: str = "car"
    score: float = 1.0
    descriptor: tuple | None = None

    def __post_init__(self):
        if not 0.0 <= self.score <= 1.0:
            raise ValueError("score must lie in [0, 1]")


SOSA = "sosa:"


def detection_ids(frame: int, index: int) -> tuple[Iri, Iri]:
    return iri(f":det{frame}_{index}"), iri(f":b{frame}_{index}")


def frame_triples(frame: int, records: Sequence[DetectionRecord], camera: Iri) -> list[tuple]:
    """Observation of one frame plus one annotated detection per record."""
    image = iri(f":image{frame}")
    img = QuotedTriple(image, A, iri(":Image2D"))
    out = [
        (img, A, iri("sosa:Observation")),
        (img, iri("sosa:madeBySensor"), camera),
        (img, iri("sosa:resultTime"), integer(frame)),
    ]
    for k, rec in enumerate(records):
        det, box = detection_ids(frame, k)
        q = QuotedTriple(det, iri(":det"), box)
        out += [
            (q, A, iri(":Detection")),
            (q, iri("sosa:resultTime"), integer(frame)),
            (q, iri("sosa:hasSimpleResult"), string(rec.label)),
            (q, iri(":score"), string(repr(float(rec.score)))),
            (q, iri(":isDetectionOf"), image),
            (q, iri("sosa:usedProcedure"), iri(":Yolo")),
        ]
    return out


def tracklet_triples(frame: int, trk: Iri, predicted_box: Iri, obj: Iri) -> list[tuple]:
    q = QuotedTriple(trk, iri(":trk"), predicted_box)
    return [
        (q, A, iri(":Tracklet")),
        (q, iri("sosa:resultTime"), integer(frame)),
        (q, iri("sosa:usedProcedure"), iri(":KalmanFilter")),
        (trk, iri(":trklet"), obj),
    ]


def detections_to_stream(records: Sequence[DetectionRecord], camera: Iri, uri: Iri | None = None) -> SemanticStream:
    frames = [r.frame for r in records]
    if frames != sorted(frames):
        raise ValueError("detection records must be sorted by frame")
    stream = SemanticStream(uri or iri(":ssr"))
    for frame, group in _by_frame(records):
        stream.extend(frame_triples(frame, group, camera), frame)
    return stream


def _by_frame(records: Sequence[DetectionRecord]):
    groups: dict = {}
    for r in records:
        groups.setdefault(r.frame, []).append(r)
    return sorted(groups.items())


def read_detection_log(source: str | Path | io.TextIOBase) -> list[DetectionRecord]:
    """Parse ``frame,x,y,w,h,label,score[,d1..dk]`` CSV (header required)."""
    text = source.read() if hasattr(source, "read") else Path(source).read_text()
    rows = list(csv.reader(io.StringIO(text)))
    if not rows or [c.strip() for c in rows[0][:7]] != ["frame", "x", "y", "w", "h", "label", "score"]:
        raise ValueError("detection log must start with header frame,x,y,w,h,label,score")
    dims = None
    out = []
    for lineno, row in enumerate(rows[1:], 2):
        if not row:
            continue
        desc = tuple(float(v) for v in row[7:]) or None
        if desc is not None:
            if dims is None:
                dims = len(desc)
            elif len(desc) != dims:
                raise ValueError(f"line {lineno}: descriptor length {len(desc)} != {dims}")
        out.append(
            DetectionRecord(
                int(row[0]),
                BoundingBox(float(row[1]), float(row[2]), float(row[3]), float(row[4])),
                row[5],
                float(row[6]),
                desc,
            )
        )
    return out


def write_detection_log(records: Iterable[DetectionRecord]) -> str:
    records = list(records)
    k = max((len(r.descriptor) for r in records if r.descriptor), default=0)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["frame", "x", "y", "w", "h", "label", "score"] + [f"d{i + 1}" for i in range(k)])
    for r in records:
        b = r.box
        row = [r.frame, *(repr(float(v)) for v in (b.x, b.y, b.w, b.h)), r.label, repr(float(r.score))]
        row += [repr(float(v)) for v in (r.descriptor or ())]
        w.writerow(row)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# tracker


@dataclass
class TrackerConfig:
    max_age: int = 5
    spawn_score: float = 0.5
    gallery_capacity: int = 100
    camera: Iri = field(default_factory=lambda: iri(":cam1"))
    stream: Iri = field(default_factory=lambda: iri(":ssr"))
    ticks_per_second: float = 1.0


@dataclass
class Tracklet:
    id: Iri
    state: KalmanState
    object: Iri
    last_update: int
    gallery: deque = field(default_factory=deque)
    misses: int = 0
    alive: bool = True
    last_predict: int = 0


@dataclass(frozen=True)
class Assignment:
    frame: int
    box_index: int
    object: Iri


class Tracker:
    """Per-camera tracker: predict, emit symbols, reason, then apply chosen associations."""

    def __init__(self, rules: Sequence[Rule], config: TrackerConfig | None = None, constraints=DEFAULT_CONSTRAINTS):
        self.rules = list(rules)
        self.config = config or TrackerConfig()
        self.constraints = constraints
        self.tracklets: list[Tracklet] = []
        self.stream = SemanticStream(self.config.stream)
        self.graph = KnowledgeGraph()
        self.boxes: dict = {}
        self.descriptors: dict = {}
        self._next = 1
        self.builtins = {"iou": self._iou, "appDist": self._app_dist}

    def _iou(self, a, b) -> float:
        return iou(self.boxes[a], self.boxes[b])

    def _descs(self, term):
        for t in self.tracklets:
            if t.id == term:
                return list(t.gallery)
        d = self.descriptors.get(term)
        return [d] if d is not None else []

    def _app_dist(self, a, b) -> float:
        da, db = self._descs(a), self._descs(b)
        if not da or not db:
            raise ValueError("no appearance descriptor")
        return min(appearance_distance(x, y) for x in da for y in db)

    def _spawn(self, frame: int, rec: DetectionRecord) -> Tracklet:
        n = self._next
        self._next += 1
        trk = Tracklet(iri(f":trk{n}"), KalmanState.from_box(rec.box), iri(f":obj{n}"), frame, last_predict=frame)
        trk.gallery = deque(maxlen=self.config.gallery_capacity)
        if rec.descriptor is not None:
            trk.gallery.append(rec.descriptor)
        self.tracklets.append(trk)
        return trk

    def step(self, frame: int, records: Sequence[DetectionRecord]) -> list[Assignment]:
        cfg = self.config
        triples = frame_triples(frame, records, cfg.camera)
        for k, rec in enumerate(records):
            _, box = detection_ids(frame, k)
            self.boxes[box] = rec.box
            if rec.descriptor is not None:
                self.descriptors[box] = rec.descriptor
        for t in self.tracklets:
            if not t.alive:
                continue
            t.state = kf_predict(t.state, max(1, frame - t.last_predict))
            t.last_predict = frame
            pbox = iri(f":p{frame}_{t.id.value.rsplit('trk', 1)[-1]}")
            self.boxes[pbox] = t.state.box()
            triples += tracklet_triples(frame, t.id, pbox, t.object)
        self.stream.extend(triples, frame)

        answer, _ = evaluate_tick(
            self.rules, {self.stream.uri: self.stream}, self.graph, frame,
            constraints=self.constraints, builtins=self.builtins,
            ticks_per_second=cfg.ticks_per_second, output=self.stream,
        )
        index = {detection_ids(frame, k)[1]: k for k in range(len(records))}
        by_object = {t.object: t for t in self.tracklets}
        matched: dict = {}
        for f in answer.facts:
            s, p, o = f.triple
            if p == SOSA_IS_SAMPLE_OF and s in index and o in by_object and index[s] not in matched:
                matched[index[s]] = by_object[o]

        out = []
        updated = set()
        for k, rec in enumerate(records):
            trk = matched.get(k)
            if trk is not None and trk.id not in updated:
                if not trk.alive:
                    trk.state = KalmanState.from_box(rec.box)
                    trk.alive = True
                else:
                    trk.state = kf_update(trk.state, rec.box)
                trk.last_update = frame
                trk.last_predict = frame
                trk.misses = 0
                if rec.descriptor is not None:
                    trk.gallery.append(rec.descriptor)
                updated.add(trk.id)
                out.append(Assignment(frame, k, trk.object))
            elif rec.score >= cfg.spawn_score:
                trk = self._spawn(frame, rec)
                updated.add(trk.id)
                out.append(Assignment(frame, k, trk.object))
        for t in self.tracklets:
            if t.alive and t.id not in updated:
                t.misses += 1
                if t.misses > cfg.max_age:
                    t.alive = False
        return out


def run_tracker(
    records: Sequence[DetectionRecord],
    rules: Sequence[Rule],
    config: TrackerConfig | None = None,
    constraints=DEFAULT_CONSTRAINTS,
) -> list[Assignment]:
    """Track every frame between the first and last record (empty frames included)."""
    frames = [r.frame for r in records]
    if frames != sorted(frames):
        raise ValueError("detection records must be sorted by frame")
    if not records:
        return []
    tracker = Tracker(rules, config, constraints)
    grouped = dict(_by_frame(records))
    out = []
    for frame in range(frames[0], frames[-1] + 1):
        out.extend(tracker.step(frame, grouped.get(frame, [])))
    return out


def write_assignments(assignments: Iterable[Assignment]) -> str:
    lines = ["frame,box_index,object_iri"]
    lines += [f"{a.frame},{a.box_index},{a.object.value}" for a in assignments]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class TrackingScore:
    matches: int
    misses: int
    switches: int


def score_tracking(assignments: Sequence[Assignment], truth: Sequence[tuple]) -> TrackingScore:
    """Matches, misses and identity switches against ``(frame, box_index, object_id)`` truth."""
    predicted = {(a.frame, a.box_index): a.object for a in assignments}
    last: dict = {}
    matches = misses = switches = 0
    for frame, k, gt in sorted(truth):
        hyp = predicted.get((frame, k))
        if hyp is None:
            misses += 1
            continue
        matches += 1
        if gt in last and last[gt] != hyp:
            switches += 1
        last[gt] = hyp
    return TrackingScore(matches, misses, switches)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class ObjectSpec:
    id: str
    waypoints: list  # [(frame, cx, cy)], frames increasing
    w: float = 40.0
    h: float = 30.0
    label: str = "car"

    def position(self, frame: int):
        pts = self.waypoints
        if frame < pts[0][0] or frame > pts[-1][0]:
            return None
        for (f0, x0, y0), (f1, x1, y1) in zip(pts, pts[1:]):
            if f0 <= frame <= f1:
                a = 0.0 if f1 == f0 else (frame - f0) / (f1 - f0)
                return x0 + a * (x1 - x0), y0 + a * (y1 - y0)
        return pts[0][1], pts[0][2]


@dataclass
class SceneSpec:
    objects: list
    occlusions: list = field(default_factory=list)  # (object_id, first_frame, last_frame)
    noise_sigma: float = 0.0
    descriptor_dim: int = 16
    descriptor_noise: float = 0.02
    score: float = 0.9
    seed: int = 0


def generate_synthetic_scene(spec: SceneSpec) -> tuple[list[DetectionRecord], list[tuple]]:
    """Detection log and exact ``(frame, box_index, object_id)`` ground truth."""
    ids = [o.id for o in spec.objects]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate object ids")
    rng = np.random.default_rng(spec.seed)
    bases = {}
    for o in spec.objects:
        v = rng.normal(size=spec.descriptor_dim)
        bases[o.id] = v / np.linalg.norm(v)
    hidden = {(oid, f) for oid, a, b in spec.occlusions for f in range(a, b + 1)}
    first = min(o.waypoints[0][0] for o in spec.objects) if spec.objects else 0
    last = max(o.waypoints[-1][0] for o in spec.objects) if spec.objects else -1
    records, truth = [], []
    for frame in range(first, last + 1):
        k = 0
        for o in spec.objects:
            pos = o.position(frame)
            noise = rng.normal(scale=spec.noise_sigma, size=2) if spec.noise_sigma > 0 else np.zeros(2)
            dnoise = rng.normal(scale=spec.descriptor_noise, size=spec.descriptor_dim)
            if pos is None or (o.id, frame) in hidden:
                continue
            cx, cy = float(pos[0] + noise[0]), float(pos[1] + noise[1])
            desc = bases[o.id] + dnoise
            desc = desc / np.linalg.norm(desc)
            box = BoundingBox(cx - o.w / 2, cy - o.h / 2, o.w, o.h)
            records.append(DetectionRecord(frame, box, o.label, spec.score, tuple(float(round(v, 6)) for v in desc)))
            truth.append((frame, k, o.id))
            k += 1
    return records, truth
