import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import corpus, crossing_scene, occlusion_scene, single_gap_scene
from thoth.mot import (
    Assignment,
    BoundingBox,
    DetectionRecord,
    KalmanState,
    ObjectSpec,
    SceneSpec,
    Tracker,
    TrackerConfig,
    TrackingScore,
    appearance_distance,
    detections_to_stream,
    generate_synthetic_scene,
    iou,
    kf_predict,
    kf_update,
    read_detection_log,
    run_tracker,
    score_tracking,
    write_assignments,
    write_detection_log,
)
from thoth.rdfstar import iri

CAM = iri(":cam1")


def box(x, y, w, h):
    return BoundingBox(x, y, w, h)


# -- geometry -----------------------------------------------------------------


def test_iou_examples():
    assert iou(box(0, 0, 2, 2), box(1, 0, 2, 2)) == pytest.approx(1 / 3)
    assert iou(box(0, 0, 2, 2), box(0, 0, 2, 2)) == 1.0
    assert iou(box(0, 0, 2, 2), box(5, 5, 1, 1)) == 0.0
    # touching edges share no area
    assert iou(box(0, 0, 2, 2), box(2, 0, 2, 2)) == 0.0
    assert iou(box(0, 0, 4, 4), box(1, 1, 2, 2)) == pytest.approx(4 / 16)


def test_box_rejects_degenerate():
    with pytest.raises(ValueError):
        BoundingBox(0, 0, 0, 3)


def grid_iou(b1, b2, step=0.05):
    xs = np.arange(-10, 30, step) + step / 2
    X, Y = np.meshgrid(xs, xs)

    def inside(b):
        return (X >= b.x) & (X < b.x + b.w) & (Y >= b.y) & (Y < b.y + b.h)

    a, b = inside(b1), inside(b2)
    union = (a | b).sum()
    return (a & b).sum() / union if union else 0.0


coord = st.integers(0, 20).map(lambda v: v / 2)
size = st.integers(1, 16).map(lambda v: v / 2)


@settings(max_examples=40, deadline=None)
@given(coord, coord, size, size, coord, coord, size, size)
def test_iou_matches_pixel_grid(x1, y1, w1, h1, x2, y2, w2, h2):
    b1, b2 = box(x1, y1, w1, h1), box(x2, y2, w2, h2)
    assert iou(b1, b2) == pytest.approx(grid_iou(b1, b2), abs=0.01)


@settings(max_examples=60, deadline=None)
@given(coord, coord, size, size, coord, coord, size, size)
def test_iou_symmetric_and_bounded(x1, y1, w1, h1, x2, y2, w2, h2):
    b1, b2 = box(x1, y1, w1, h1), box(x2, y2, w2, h2)
    v = iou(b1, b2)
    assert 0.0 <= v <= 1.0
    assert v == iou(b2, b1)


def test_box_measurement_round_trip():
    b = box(10, 20, 40, 30)
    back = BoundingBox.from_z(b.to_z())
    assert (back.x, back.y, back.w, back.h) == pytest.approx((10, 20, 40, 30))


def test_appearance_distance_examples():
    assert appearance_distance([1, 0], [1, 0]) == 0.0
    assert appearance_distance([1, 0], [-1, 0]) == 1.0
    assert appearance_distance([1, 0], [0, 1]) == pytest.approx(0.5)
    assert appearance_distance([2, 0], [1, 0]) == 0.0
    with pytest.raises(ValueError):
        appearance_distance([0, 0], [1, 0])
    with pytest.raises(ValueError):
        appearance_distance([1, 0, 0], [1, 0])


# -- Kalman filter ------------------------------------------------------------


def moving_state():
    s = KalmanState.from_box(box(0, 0, 40, 30))
    for f in range(1, 4):
        s = kf_update(kf_predict(s), box(5 * f, 0, 40, 30))
    return s


def test_multi_step_predict_equals_repeated_single_steps():
    s = moving_state()
    once = kf_predict(s, 3)
    stepped = kf_predict(kf_predict(kf_predict(s)))
    np.testing.assert_allclose(once.mean, stepped.mean)
    np.testing.assert_allclose(once.covariance, stepped.covariance)


def test_predict_rejects_zero_dt():
    with pytest.raises(ValueError):
        kf_predict(moving_state(), 0)


def test_static_updates_converge():
    target = box(100, 50, 40, 30)
    s = KalmanState.from_box(box(90, 45, 40, 30))
    for _ in range(30):
        s = kf_update(kf_predict(s), target)
    np.testing.assert_allclose(s.mean[:4], target.to_z(), atol=0.5)
    assert abs(s.mean[4]) < 0.5


def test_constant_velocity_is_learned():
    s = KalmanState.from_box(box(0, 0, 40, 30))
    for f in range(1, 20):
        s = kf_update(kf_predict(s), box(3 * f, 0, 40, 30))
    assert s.mean[4] == pytest.approx(3.0, abs=0.2)


def test_covariance_stays_symmetric_psd():
    s = moving_state()
    for _ in range(10):
        s = kf_predict(s)
        s = kf_update(s, box(20, 0, 40, 30))
        assert np.allclose(s.covariance, s.covariance.T)
        assert np.linalg.eigvalsh(s.covariance).min() > -1e-9


def test_update_rejects_non_finite():
    s = moving_state()
    bad = KalmanState(np.full(7, np.nan), s.covariance)
    with pytest.raises(ValueError):
        kf_update(bad, box(0, 0, 1, 1))


def test_shrinking_area_is_clamped():
    s = KalmanState.from_box(box(0, 0, 10, 10))
    s = KalmanState(s.mean.copy(), s.covariance)
    s.mean[6] = -500.0
    for _ in range(5):
        s = kf_predict(s)
        assert s.mean[2] > 0


# -- symbolic form ------------------------------------------------------------


def test_stream_triple_counts():
    one = [DetectionRecord(0, box(0, 0, 4, 4))]
    assert len(detections_to_stream(one, CAM).elements) == 9
    two = one + [DetectionRecord(0, box(9, 9, 4, 4))]
    assert len(detections_to_stream(two, CAM).elements) == 15


def test_stream_requires_sorted_frames():
    recs = [DetectionRecord(2, box(0, 0, 4, 4)), DetectionRecord(1, box(0, 0, 4, 4))]
    with pytest.raises(ValueError):
        detections_to_stream(recs, CAM)


def test_detection_record_score_range():
    with pytest.raises(ValueError):
        DetectionRecord(0, box(0, 0, 1, 1), score=1.5)


def test_detection_log_round_trip():
    records, _ = generate_synthetic_scene(crossing_scene())
    text = write_detection_log(records)
    assert read_detection_log(io.StringIO(text)) == records


def test_detection_log_needs_header():
    with pytest.raises(ValueError):
        read_detection_log(io.StringIO("0,1,2,3,4,car,0.9\n"))


def test_detection_log_descriptor_length_mismatch():
    text = "frame,x,y,w,h,label,score,d1,d2\n0,0,0,4,4,car,0.9,1,0\n1,0,0,4,4,car,0.9,1\n"
    with pytest.raises(ValueError):
        read_detection_log(io.StringIO(text))


# -- tracking -----------------------------------------------------------------


def track(spec, rules, **cfg):
    records, truth = generate_synthetic_scene(spec)
    assignments = run_tracker(records, rules, TrackerConfig(**cfg) if cfg else None)
    return assignments, truth, score_tracking(assignments, truth)


def test_single_object_keeps_one_identity(sort_rules):
    spec = SceneSpec([ObjectSpec("a", [(0, 50, 50), (10, 100, 50)])])
    assignments, truth, score = track(spec, sort_rules)
    assert score == TrackingScore(len(truth), 0, 0)
    assert {a.object for a in assignments} == {iri(":obj1")}


def test_crossing_objects_on_separate_lanes(sort_rules):
    _, truth, score = track(crossing_scene(), sort_rules)
    assert score.switches == 0 and score.misses == 0 and score.matches == len(truth)


def test_short_gap_is_bridged(sort_rules):
    assignments, truth, score = track(single_gap_scene(), sort_rules)
    assert score.switches == 0
    assert len({a.object for a in assignments}) == 2


def test_gap_longer_than_max_age_respawns(sort_rules):
    spec = SceneSpec([ObjectSpec("a", [(0, 50, 50), (12, 50, 50)])], occlusions=[("a", 3, 8)])
    short, _, _ = track(spec, sort_rules, max_age=2)
    long, _, _ = track(spec, sort_rules, max_age=10)
    assert {a.object for a in short if a.frame >= 9} == {iri(":obj2")}
    assert {a.object for a in long} == {iri(":obj1")}


def test_occlusion_sort_switches_deepsort_recovers(sort_rules, deepsort_rules):
    _, _, sort_score = track(occlusion_scene(), sort_rules)
    _, _, deep_score = track(occlusion_scene(), deepsort_rules)
    assert sort_score.switches >= 1
    assert deep_score.switches == 0


def test_low_score_detections_do_not_spawn(sort_rules):
    spec = SceneSpec([ObjectSpec("a", [(0, 50, 50), (4, 50, 50)])], score=0.3)
    assignments, _, _ = track(spec, sort_rules)
    assert assignments == []


def test_gallery_is_bounded(deepsort_rules):
    records, _ = generate_synthetic_scene(SceneSpec([ObjectSpec("a", [(0, 50, 50), (12, 60, 50)])]))
    tracker = Tracker(deepsort_rules, TrackerConfig(gallery_capacity=3))
    for f in range(13):
        tracker.step(f, [r for r in records if r.frame == f])
    assert all(len(t.gallery) <= 3 for t in tracker.tracklets)


def test_tracking_is_deterministic(deepsort_rules):
    a1, _, _ = track(occlusion_scene(), deepsort_rules)
    a2, _, _ = track(occlusion_scene(), deepsort_rules)
    assert write_assignments(a1) == write_assignments(a2)


def test_corpus_occlusion_log(sort_rules, deepsort_rules):
    records = read_detection_log(corpus("detections", "occlusion.csv"))
    truth = [
        (int(f), int(k), o)
        for f, k, o in (line.split(",") for line in corpus("detections", "occlusion_truth.csv").read_text().split()[1:])
    ]
    assert score_tracking(run_tracker(records, deepsort_rules), truth).switches == 0
    assert score_tracking(run_tracker(records, sort_rules), truth).switches >= 1


def test_run_tracker_empty_and_unsorted(sort_rules):
    assert run_tracker([], sort_rules) == []
    recs = [DetectionRecord(2, box(0, 0, 4, 4)), DetectionRecord(1, box(0, 0, 4, 4))]
    with pytest.raises(ValueError):
        run_tracker(recs, sort_rules)


def test_assignments_csv():
    text = write_assignments([Assignment(0, 1, iri(":obj2"))])
    assert text.splitlines()[0] == "frame,box_index,object_iri"
    assert text.splitlines()[1].startswith("0,1,")


# -- scoring and scenes -------------------------------------------------------


def test_score_counts_switch_and_miss():
    o1, o2 = iri(":obj1"), iri(":obj2")
    truth = [(0, 0, "a"), (1, 0, "a"), (2, 0, "a")]
    assigned = [Assignment(0, 0, o1), Assignment(1, 0, o2)]
    assert score_tracking(assigned, truth) == TrackingScore(2, 1, 1)


def test_scene_is_seeded():
    assert generate_synthetic_scene(occlusion_scene(5)) == generate_synthetic_scene(occlusion_scene(5))
    assert generate_synthetic_scene(occlusion_scene(5)) != generate_synthetic_scene(occlusion_scene(6))


def test_scene_rejects_duplicate_ids():
    spec = SceneSpec([ObjectSpec("a", [(0, 0, 0)]), ObjectSpec("a", [(0, 5, 5)])])
    with pytest.raises(ValueError):
        generate_synthetic_scene(spec)


def test_occluded_frames_have_no_detection():
    records, truth = generate_synthetic_scene(occlusion_scene())
    assert not any(f in (7, 8, 9) and o == "a" for f, _, o in truth)
    assert len(records) == len(truth)
