#!/usr/bin/env python3
"""
Detection and Label Evaluation
Rotated IoU (BEV and 3D), greedy matching, 40-point interpolated AP and depth-bucketed
precision / recall for scored detections as well as unscored label sets.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from shapely.geometry import Polygon

from mobile_labeler.config import EvalConfig, bucket_name
from mobile_labeler.errors import FrameMismatchError
from mobile_labeler.ingest.lidar_io import Box, LabelSet
from mobile_labeler.utils.box_geometry import bev_corners

logger = logging.getLogger(__name__)

RECALL_POSITIONS = np.arange(1, 41) / 40.0
TABLE_IOUS = (0.25, 0.5)
TABLE_MODES = ("bev", "3d")


# ---------------------------------------------------------------- IoU

def bev_polygon(box: Box) -> Polygon:
    return Polygon(bev_corners(box))


def _bev_intersection(a: Box, b: Box) -> float:
    # cheap reject on circumscribed circles
    reach = np.hypot(a.l, a.w) / 2 + np.hypot(b.l, b.w) / 2
    if np.hypot(a.cx - b.cx, a.cy - b.cy) >= reach:
        return 0.0
    return bev_polygon(a).intersection(bev_polygon(b)).area


def iou_bev(a: Box, b: Box) -> float:
    inter = _bev_intersection(a, b)
    union = a.l * a.w + b.l * b.w - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


def iou_3d(a: Box, b: Box) -> float:
    overlap_z = min(a.z_max, b.z_max) - max(a.z_min, b.z_min)
    if overlap_z <= 0:
        return 0.0
    inter = _bev_intersection(a, b) * overlap_z
    union = a.volume + b.volume - inter
    return float(min(max(inter / union, 0.0), 1.0)) if union > 0 else 0.0


IOU_FUNCTIONS = {"bev": iou_bev, "3d": iou_3d}


def iou_matrix(dets: Sequence[Box], gts: Sequence[Box], mode: str = "bev") -> np.ndarray:
    iou = IOU_FUNCTIONS[mode]
    return np.array([[iou(d, g) for g in gts] for d in dets]).reshape(len(dets), len(gts))


# ---------------------------------------------------------------- matching

@dataclass(frozen=True)
class MatchResult:
    """det_to_gt[i] is the matched GT index or None; scores are None for unscored labels"""

    det_to_gt: List[Optional[int]]
    det_iou: List[float]
    gt_covered: List[bool]
    scores: List[Optional[float]]

    @property
    def true_positives(self) -> int:
        return sum(m is not None for m in self.det_to_gt)

    @property
    def n_dets(self) -> int:
        return len(self.det_to_gt)

    @property
    def n_gts(self) -> int:
        return len(self.gt_covered)


def match_greedy(dets: Sequence[Box], gts: Sequence[Box], threshold: float, mode: str = "bev") -> MatchResult:
    """Detections in descending score (ties by index) take the highest-IoU free GT at or above threshold"""
    ious = iou_matrix(dets, gts, mode)
    det_to_gt: List[Optional[int]] = [None] * len(dets)
    det_iou = [0.0] * len(dets)
    covered = [False] * len(gts)

    scores = np.array([d.score if d.score is not None else 0.0 for d in dets])
    for i in np.argsort(-scores, kind="stable"):
        if not len(gts):
            break
        candidates = np.where(covered, -1.0, ious[i])
        j = int(np.argmax(candidates))
        if candidates[j] >= threshold:
            det_to_gt[i], det_iou[i], covered[j] = j, float(ious[i, j]), True
    return MatchResult(det_to_gt, det_iou, covered, [d.score for d in dets])


def match_by_iou(labels: Sequence[Box], gts: Sequence[Box], threshold: float, mode: str = "bev") -> MatchResult:
    """Score-free one-to-one matching: pairs taken in descending IoU, ties by (label, GT) index"""
    ious = iou_matrix(labels, gts, mode)
    det_to_gt: List[Optional[int]] = [None] * len(labels)
    det_iou = [0.0] * len(labels)
    covered = [False] * len(gts)

    rows, cols = np.nonzero(ious >= threshold)
    order = np.lexsort((cols, rows, -ious[rows, cols]))
    for i, j in zip(rows[order], cols[order]):
        if det_to_gt[i] is None and not covered[j]:
            det_to_gt[i], det_iou[i], covered[j] = int(j), float(ious[i, j]), True
    return MatchResult(det_to_gt, det_iou, covered, [b.score for b in labels])


# ---------------------------------------------------------------- AP

def pr_curve(matches: Sequence[MatchResult]) -> pd.DataFrame:
    """Pooled precision / recall after each detection in descending score order"""
    scores, hits = [], []
    for match in matches:
        scores.extend(s if s is not None else 0.0 for s in match.scores)
        hits.extend(m is not None for m in match.det_to_gt)
    n_gt = sum(match.n_gts for match in matches)

    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    tp = np.cumsum(np.asarray(hits, dtype=np.float64)[order])
    ranks = np.arange(1, len(order) + 1)
    return pd.DataFrame(
        {
            "score": np.asarray(scores, dtype=np.float64)[order],
            "precision": tp / ranks if len(order) else np.empty(0),
            "recall": tp / n_gt if n_gt else np.zeros(len(order)),
        }
    )


def average_precision(matches: Sequence[MatchResult]) -> Optional[float]:
    """40-point interpolated AP over frames pooled together; None without ground truth"""
    if sum(match.n_gts for match in matches) == 0:
        return None
    curve = pr_curve(matches)
    precision = curve["precision"].to_numpy()
    recall = curve["recall"].to_numpy()
    interpolated = [precision[recall >= r].max() if (recall >= r).any() else 0.0 for r in RECALL_POSITIONS]
    return float(np.mean(interpolated))


# ---------------------------------------------------------------- bucketing

def _in_bucket(box: Box, bucket: Tuple[float, float]) -> bool:
    lo, hi = bucket
    return lo <= box.bev_distance < hi


def _in_any_bucket(box: Box, cfg: EvalConfig) -> bool:
    return any(_in_bucket(box, bucket) for bucket in cfg.depth_buckets)


def _aligned(labels: Sequence[LabelSet], gts: Sequence[LabelSet]) -> List[Tuple[LabelSet, LabelSet]]:
    by_frame = {ls.frame_id: ls for ls in labels}
    truth = {ls.frame_id: ls for ls in gts}
    if set(by_frame) != set(truth):
        raise FrameMismatchError(set(by_frame) ^ set(truth))
    return [(by_frame[frame_id], truth[frame_id]) for frame_id in sorted(truth)]


def _ratio(numerator: int, denominator: int) -> Optional[float]:
    return numerator / denominator if denominator else None


def label_quality(
    labels: Sequence[LabelSet],
    gts: Sequence[LabelSet],
    cfg: EvalConfig,
    mode: Optional[str] = None,
    iou_threshold: Optional[float] = None,
) -> Dict[str, Dict]:
    """
    Precision / recall of a label set per depth bucket. Matching ignores scores and runs once per
    frame; a label counts toward precision in its own bucket, a GT toward recall in its bucket.
    """
    mode = mode or cfg.mode
    threshold = iou_threshold or cfg.iou_threshold
    tallies = {bucket: {"labels": 0, "label_tp": 0, "gts": 0, "gt_tp": 0} for bucket in cfg.depth_buckets}

    for label_set, truth in _aligned(labels, gts):
        boxes = [b for b in label_set.boxes if _in_any_bucket(b, cfg)]
        targets = [g for g in truth.boxes if _in_any_bucket(g, cfg)]
        match = match_by_iou(boxes, targets, threshold, mode)
        for bucket, tally in tallies.items():
            for box, gt_index in zip(boxes, match.det_to_gt):
                if _in_bucket(box, bucket):
                    tally["labels"] += 1
                    tally["label_tp"] += gt_index is not None
            for gt, covered in zip(targets, match.gt_covered):
                if _in_bucket(gt, bucket):
                    tally["gts"] += 1
                    tally["gt_tp"] += covered

    return {
        bucket_name(*bucket): {
            "precision": _ratio(t["label_tp"], t["labels"]),
            "recall": _ratio(t["gt_tp"], t["gts"]),
            "n_labels": t["labels"],
            "n_gt": t["gts"],
        }
        for bucket, t in tallies.items()
    }


def max_recall(labels: Sequence[LabelSet], gts: Sequence[LabelSet], cfg: EvalConfig) -> Dict[str, Optional[float]]:
    return {bucket: stats["recall"] for bucket, stats in label_quality(labels, gts, cfg).items()}


# ---------------------------------------------------------------- detections

def _is_scored(labels: Sequence[LabelSet]) -> bool:
    return all(box.score is not None for ls in labels for box in ls.boxes)


def evaluate_detections(
    dets: Sequence[LabelSet],
    gts: Sequence[LabelSet],
    cfg: EvalConfig,
    mode: Optional[str] = None,
    iou_threshold: Optional[float] = None,
) -> Dict:
    """
    Per-bucket AP / precision / recall plus the pooled PR curve.
    AP is reported only when every box carries a score; each bucket matches only the
    detections and GTs whose centers fall inside it.
    """
    mode = mode or cfg.mode
    threshold = iou_threshold or cfg.iou_threshold
    pairs = _aligned(dets, gts)
    scored = _is_scored(dets)

    if not scored:
        quality = label_quality(dets, gts, cfg, mode, threshold)
        buckets = {name: {"precision": q["precision"], "recall": q["recall"]} for name, q in quality.items()}
        return {"mode": mode, "iou": threshold, "scored": False, "buckets": buckets, "pr_curve": pd.DataFrame()}

    buckets = {}
    curves = []
    for bucket in cfg.depth_buckets:
        matches = []
        for det_set, truth in pairs:
            boxes = [b for b in det_set.boxes if _in_bucket(b, bucket)]
            targets = [g for g in truth.boxes if _in_bucket(g, bucket)]
            matches.append(match_greedy(boxes, targets, threshold, mode))

        n_dets = sum(m.n_dets for m in matches)
        n_gts = sum(m.n_gts for m in matches)
        tp = sum(m.true_positives for m in matches)
        name = bucket_name(*bucket)
        buckets[name] = {
            "ap": average_precision(matches),
            "precision": _ratio(tp, n_dets),
            "recall": _ratio(tp, n_gts),
        }
        curve = pr_curve(matches)
        curve.insert(0, "bucket", name)
        curves.append(curve)

    logger.info(f"✅ Evaluated {len(pairs)} frames ({mode.upper()} @ IoU {threshold})")
    return {"mode": mode, "iou": threshold, "scored": True, "buckets": buckets, "pr_curve": pd.concat(curves, ignore_index=True)}


def table(dets: Sequence[LabelSet], gts: Sequence[LabelSet], cfg: EvalConfig) -> Dict[str, Dict[str, Dict[str, Optional[float]]]]:
    """AP for every (mode, IoU threshold, bucket) combination"""
    result: Dict[str, Dict[str, Dict[str, Optional[float]]]] = {}
    for mode in TABLE_MODES:
        for threshold in TABLE_IOUS:
            report = evaluate_detections(dets, gts, cfg, mode=mode, iou_threshold=threshold)
            result.setdefault(mode, {})[f"{threshold:g}"] = {
                name: stats.get("ap") for name, stats in report["buckets"].items()
            }
    return result
