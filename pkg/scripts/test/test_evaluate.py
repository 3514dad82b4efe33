#!/usr/bin/env python3
"""
Test Evaluation
Rotated IoU against clipping and raster oracles, greedy matching, interpolated AP and bucketed label quality
"""

import math

import numpy as np
import pytest

from mobile_labeler.config import EvalConfig
from mobile_labeler.core.evaluate import (
    average_precision,
    evaluate_detections,
    iou_3d,
    iou_bev,
    label_quality,
    match_by_iou,
    match_greedy,
    table,
)
from mobile_labeler.errors import FrameMismatchError
from mobile_labeler.ingest.lidar_io import Box, LabelSet
from mobile_labeler.utils.box_geometry import bev_corners

GRID = 1000


def random_box(rng, score=None) -> Box:
    return Box(
        rng.uniform(-3, 3), rng.uniform(-3, 3), rng.uniform(-1, 1),
        rng.uniform(0.5, 5.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 2.0),
        rng.uniform(-math.pi / 2, math.pi / 2), score,
    )


def raster_mask(box: Box, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    along = (xs - box.cx) * c + (ys - box.cy) * s
    across = -(xs - box.cx) * s + (ys - box.cy) * c
    return (np.abs(along) < box.l / 2) & (np.abs(across) < box.w / 2)


def raster_overlap(a: Box, b: Box) -> float:
    """Intersection area by sampling cell centers over the overlap of the two bounding rectangles"""
    ca, cb = bev_corners(a), bev_corners(b)
    lo = np.maximum(ca.min(axis=0), cb.min(axis=0))
    hi = np.minimum(ca.max(axis=0), cb.max(axis=0))
    if (hi <= lo).any():
        return 0.0
    cell = (hi - lo) / GRID
    xs, ys = np.meshgrid(lo[0] + (np.arange(GRID) + 0.5) * cell[0], lo[1] + (np.arange(GRID) + 0.5) * cell[1])
    inside = raster_mask(a, xs, ys) & raster_mask(b, xs, ys)
    return float(inside.sum() * cell[0] * cell[1])


def clipped_area(a: Box, b: Box) -> float:
    """Intersection area by clipping one rectangle against the edges of the other"""
    polygon = [tuple(p) for p in bev_corners(a)]
    clip = bev_corners(b)
    for k in range(4):
        (x1, y1), (x2, y2) = clip[k], clip[(k + 1) % 4]

        def side(p):
            return (x2 - x1) * (p[1] - y1) - (y2 - y1) * (p[0] - x1)

        clipped = []
        for i, p in enumerate(polygon):
            q = polygon[(i + 1) % len(polygon)]
            if side(p) >= 0:
                clipped.append(p)
            if (side(p) >= 0) != (side(q) >= 0):
                t = side(p) / (side(p) - side(q))
                clipped.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
        polygon = clipped
        if not polygon:
            return 0.0
    xs, ys = np.array(polygon).T
    return float(abs(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1))) / 2)


def frames(*boxes_per_frame, kind="detection"):
    return [LabelSet(f"f{i}", list(boxes), kind) for i, boxes in enumerate(boxes_per_frame)]


# ---------------------------------------------------------------- IoU

def test_identical_and_disjoint_boxes():
    box = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.5, 0.3)
    assert iou_bev(box, box) == pytest.approx(1.0)
    assert iou_3d(box, box) == pytest.approx(1.0)
    assert iou_bev(box, Box(10.0, 0.0, 0.0, 4.0, 2.0, 1.5)) == 0.0


def test_square_rotated_by_45_degrees():
    square = Box(0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
    assert iou_bev(square, Box(0.0, 0.0, 0.0, 1.0, 1.0, 1.0, math.pi / 4)) == pytest.approx(math.sqrt(2) / 2, abs=1e-9)


def test_vertical_overlap_scales_3d_iou():
    lower = Box(0.0, 0.0, 1.0, 2.0, 2.0, 2.0)
    upper = Box(0.0, 0.0, 2.0, 2.0, 2.0, 2.0)
    assert iou_3d(lower, upper) == pytest.approx(1 / 3)
    assert iou_bev(lower, upper) == pytest.approx(1.0)
    assert iou_3d(lower, Box(0.0, 0.0, 5.0, 2.0, 2.0, 2.0)) == 0.0


def test_same_vertical_extent_3d_equals_bev(rng):
    for _ in range(50):
        a, other = random_box(rng), random_box(rng)
        b = Box(other.cx, other.cy, a.cz, other.l, other.w, a.h, other.yaw)
        assert iou_3d(a, b) == pytest.approx(iou_bev(a, b), abs=1e-9)


def test_iou_symmetry_and_translation(rng):
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        assert iou_bev(a, b) == pytest.approx(iou_bev(b, a), abs=1e-12)
        assert iou_3d(a, b) == pytest.approx(iou_3d(b, a), abs=1e-12)
        shift = rng.uniform(-50, 50, 3)
        moved_a = Box(a.cx + shift[0], a.cy + shift[1], a.cz + shift[2], a.l, a.w, a.h, a.yaw)
        moved_b = Box(b.cx + shift[0], b.cy + shift[1], b.cz + shift[2], b.l, b.w, b.h, b.yaw)
        assert iou_3d(moved_a, moved_b) == pytest.approx(iou_3d(a, b), abs=1e-9)


def expected_ious(a: Box, b: Box, inter: float):
    bev = inter / (a.l * a.w + b.l * b.w - inter)
    volume = inter * max(0.0, min(a.z_max, b.z_max) - max(a.z_min, b.z_min))
    return bev, volume / (a.volume + b.volume - volume)


def test_iou_matches_clipping_oracle(rng):
    for _ in range(500):
        a, b = random_box(rng), random_box(rng)
        bev, full = expected_ious(a, b, clipped_area(a, b))
        assert iou_bev(a, b) == pytest.approx(bev, abs=1e-9)
        assert iou_3d(a, b) == pytest.approx(full, abs=1e-9)


def test_iou_matches_raster_oracle(rng):
    for _ in range(100):
        a, b = random_box(rng), random_box(rng)
        bev, full = expected_ious(a, b, raster_overlap(a, b))
        assert iou_bev(a, b) == pytest.approx(bev, abs=2e-3)
        assert iou_3d(a, b) == pytest.approx(full, abs=2e-3)


# ---------------------------------------------------------------- matching

def test_offset_detection_is_true_positive():
    det = Box(1.0, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.9)
    gt = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0)
    assert iou_bev(det, gt) == pytest.approx(0.6)
    match = match_greedy([det], [gt], 0.5)
    assert match.det_to_gt == [0]
    assert match_greedy([det], [gt], 0.7).det_to_gt == [None]


def test_duplicate_detection_is_false_positive():
    gt = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0)
    weak = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.4)
    strong = Box(0.2, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.8)
    match = match_greedy([weak, strong], [gt], 0.5)
    assert match.det_to_gt == [None, 0]
    assert match.gt_covered == [True]


def reference_greedy(dets, gts, threshold):
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    taken, result = set(), [None] * len(dets)
    for i in order:
        best, best_iou = None, -1.0
        for j, gt in enumerate(gts):
            if j in taken:
                continue
            iou = iou_bev(dets[i], gt)
            if iou > best_iou:
                best, best_iou = j, iou
        if best is not None and best_iou >= threshold:
            result[i] = best
            taken.add(best)
    return result


def test_greedy_matching_matches_reference(rng):
    for _ in range(30):
        gts = [random_box(rng) for _ in range(20)]
        dets = [random_box(rng, score=float(rng.uniform())) for _ in range(20)]
        assert match_greedy(dets, gts, 0.25).det_to_gt == reference_greedy(dets, gts, 0.25)


def test_score_free_matching_prefers_highest_iou():
    gt = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0)
    loose = Box(0.8, 0.0, 0.0, 4.0, 2.0, 1.0)
    tight = Box(0.1, 0.0, 0.0, 4.0, 2.0, 1.0)
    assert match_by_iou([loose, tight], [gt], 0.25).det_to_gt == [None, 0]


# ---------------------------------------------------------------- AP

def test_hand_computed_average_precision():
    gt = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0)
    miss = Box(20.0, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.9)
    hit = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.8)
    assert average_precision([match_greedy([miss, hit], [gt], 0.5)]) == pytest.approx(0.5)


def test_perfect_and_useless_detectors(rng):
    gts = [random_box(rng) for _ in range(5)]
    perfect = [Box(g.cx, g.cy, g.cz, g.l, g.w, g.h, g.yaw, 0.9) for g in gts]
    useless = [Box(g.cx + 100, g.cy, g.cz, g.l, g.w, g.h, g.yaw, 0.9) for g in gts]
    assert average_precision([match_greedy(perfect, gts, 0.5)]) == pytest.approx(1.0)
    assert average_precision([match_greedy(useless, gts, 0.5)]) == 0.0


def test_no_ground_truth_has_no_average_precision():
    assert average_precision([match_greedy([Box(0, 0, 0, 1, 1, 1, score=0.5)], [], 0.5)]) is None


def test_ranking_true_positive_first_never_lowers_ap():
    gt = Box(0.0, 0.0, 0.0, 4.0, 2.0, 1.0)
    fps = [Box(20.0 + 5 * i, 0.0, 0.0, 4.0, 2.0, 1.0, score=0.5 + 0.1 * i) for i in range(3)]
    buried = average_precision([match_greedy(fps + [Box(0, 0, 0, 4, 2, 1, score=0.1)], [gt], 0.5)])
    promoted = average_precision([match_greedy(fps + [Box(0, 0, 0, 4, 2, 1, score=0.95)], [gt], 0.5)])
    assert promoted >= buried
    assert promoted == pytest.approx(1.0)


# ---------------------------------------------------------------- label quality

CARS = [Box(5.0, 0.0, 0.0, 4.0, 2.0, 1.5), Box(12.0, 4.0, 0.0, 4.0, 2.0, 1.5),
        Box(20.0, -6.0, 0.0, 4.0, 2.0, 1.5), Box(-8.0, 8.0, 0.0, 4.0, 2.0, 1.5)]


def test_identical_labels_are_perfect():
    quality = label_quality(frames(CARS, kind="pseudo"), frames(CARS, kind="ground_truth"), EvalConfig())
    assert quality["0-30"] == {"precision": 1.0, "recall": 1.0, "n_labels": 4, "n_gt": 4}
    assert quality["30-50"]["precision"] is None


def test_empty_labels_have_zero_recall():
    quality = label_quality(frames([]), frames(CARS), EvalConfig())
    assert quality["0-30"]["precision"] is None
    assert quality["0-30"]["recall"] == 0.0


def test_one_missed_object():
    quality = label_quality(frames(CARS[:3]), frames(CARS), EvalConfig())
    assert quality["0-30"]["recall"] == pytest.approx(0.75)
    assert quality["0-30"]["precision"] == 1.0


def test_frames_must_align():
    with pytest.raises(FrameMismatchError) as excinfo:
        label_quality([LabelSet("a", [])], [LabelSet("b", [])], EvalConfig())
    assert excinfo.value.unmatched == ["a", "b"]


def test_bucket_boundary_belongs_to_farther_bucket():
    at_boundary = Box(30.0, 0.0, 0.0, 4.0, 2.0, 1.5)
    quality = label_quality(frames([at_boundary]), frames([at_boundary]), EvalConfig())
    assert quality["0-30"]["n_gt"] == 0
    assert quality["30-50"]["n_gt"] == 1


# ---------------------------------------------------------------- detections

def test_unscored_labels_report_precision_recall_only():
    report = evaluate_detections(frames(CARS), frames(CARS), EvalConfig())
    assert report["scored"] is False
    assert "ap" not in report["buckets"]["0-30"]
    assert report["buckets"]["0-30"]["recall"] == 1.0


def test_scored_detections_report_ap_and_curve():
    dets = [Box(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, 0.8) for b in CARS]
    report = evaluate_detections(frames(dets), frames(CARS), EvalConfig(iou_threshold=0.5), mode="3d")
    assert report["scored"] is True
    assert report["mode"] == "3d"
    assert report["buckets"]["0-30"]["ap"] == pytest.approx(1.0)
    assert report["buckets"]["50-80"]["ap"] is None
    assert set(report["pr_curve"]["bucket"]) == {"0-30", "0-80"}


def test_ap_table_layout():
    dets = [Box(b.cx, b.cy, b.cz, b.l, b.w, b.h, b.yaw, 0.8) for b in CARS]
    result = table(frames(dets), frames(CARS), EvalConfig())
    assert set(result) == {"bev", "3d"}
    assert set(result["bev"]) == {"0.25", "0.5"}
    assert set(result["3d"]["0.5"]) == {"0-30", "30-50", "50-80", "0-80"}
    assert result["bev"]["0.5"]["0-80"] == pytest.approx(1.0)
