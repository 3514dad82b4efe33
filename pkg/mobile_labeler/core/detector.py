#!/usr/bin/env python3
"""
Detector Contract and Baseline Geometric Detector
The self-training loop only talks to DetectorContract; the shipped baseline learns a
log-size Gaussian plus a box-bottom height prior and scores Euclidean DBSCAN clusters against it.
"""

import logging
import math
import threading
from dataclasses import dataclass, replace
from typing import Dict, List, Protocol, Sequence, runtime_checkable

import numpy as np
from sklearn.cluster import DBSCAN

from mobile_labeler.config import DetectorConfig, GroundConfig
from mobile_labeler.core.ground import GroundPlane, estimate_ground
from mobile_labeler.core.seed_labels import fit_box
from mobile_labeler.errors import DataError
from mobile_labeler.ingest.lidar_io import Box, LabelSet, Scan

logger = logging.getLogger(__name__)

VARIANCE_FLOOR = 1e-4


@dataclass(frozen=True)
class DetectorModel:
    """Diagonal Gaussian over (log l, log w, log h, bottom height above ground)"""

    mean: np.ndarray
    variance: np.ndarray
    score_threshold: float
    n_training_boxes: int

    def mahalanobis(self, features: np.ndarray) -> float:
        return float(np.sqrt(np.sum((features - self.mean) ** 2 / self.variance)))


@runtime_checkable
class DetectorContract(Protocol):
    def train(self, frames: Sequence[Scan], labels: Sequence[LabelSet]) -> object:
        """Fit from scratch; must be deterministic"""
        ...

    def infer(self, model: object, frame: Scan) -> LabelSet:
        """Scored detections (kind = detection) for one frame"""
        ...


def box_features(box: Box, ground: GroundPlane) -> np.ndarray:
    bottom = np.array([box.cx, box.cy, box.z_min])
    return np.array([math.log(box.l), math.log(box.w), math.log(box.h), float(ground.height(bottom[None])[0])])


def logistic(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    z = math.exp(x)
    return z / (1.0 + z)


class GeometricDetector:
    """Non-neural stand-in detector; grounds are cached per scan id since every round revisits the pool"""

    name = "baseline"

    def __init__(self, cfg: DetectorConfig = DetectorConfig(), ground_cfg: GroundConfig = GroundConfig()):
        self.cfg = cfg
        self.ground_cfg = ground_cfg
        self._grounds: Dict[str, GroundPlane] = {}
        self._lock = threading.RLock()

    def ground(self, frame: Scan) -> GroundPlane:
        with self._lock:
            cached = self._grounds.get(frame.scan_id)
        if cached is None:
            cached = estimate_ground(frame.xyz, self.ground_cfg)
            with self._lock:
                self._grounds[frame.scan_id] = cached
        return cached

    def train(self, frames: Sequence[Scan], labels: Sequence[LabelSet]) -> DetectorModel:
        frame_by_id = {frame.scan_id: frame for frame in frames}
        features: List[np.ndarray] = []
        for label_set in labels:
            if not label_set.boxes:
                continue
            if label_set.frame_id not in frame_by_id:
                raise DataError(f"training labels reference unknown frame {label_set.frame_id}")
            ground = self.ground(frame_by_id[label_set.frame_id])
            features.extend(box_features(box, ground) for box in label_set.boxes)
        return fit_prior(np.array(features).reshape(-1, 4), self.cfg.score_threshold)

    def infer(self, model: DetectorModel, frame: Scan) -> LabelSet:
        ground = self.ground(frame)
        xyz = frame.xyz
        keep = (ground.height(xyz) >= self.cfg.ground_clearance) & (
            np.linalg.norm(xyz[:, :2], axis=1) <= self.cfg.max_range
        )
        candidates = xyz[keep]
        if len(candidates) < self.cfg.min_samples:
            return LabelSet(frame.scan_id, [], kind="detection")

        cluster_ids = DBSCAN(eps=self.cfg.eps, min_samples=self.cfg.min_samples).fit(candidates).labels_
        boxes = []
        for cluster_id in range(cluster_ids.max() + 1):
            fitted = fit_box(candidates[cluster_ids == cluster_id], ground)
            score = self.score(model, fitted.box, ground)
            if score >= model.score_threshold:
                boxes.append(replace(fitted.box, score=score))
        logger.debug(f"{frame.scan_id}: {cluster_ids.max() + 1} clusters -> {len(boxes)} detections")
        return LabelSet(frame.scan_id, boxes, kind="detection")

    def score(self, model: DetectorModel, box: Box, ground: GroundPlane) -> float:
        distance = model.mahalanobis(box_features(box, ground))
        return logistic(self.cfg.logistic_slope * (self.cfg.logistic_center - distance))


def fit_prior(features: np.ndarray, score_threshold: float = 0.5) -> DetectorModel:
    """Moment fit of the diagonal Gaussian; variances are floored so a single box still trains"""
    if len(features) == 0:
        raise DataError("cannot train the detector on zero labeled boxes")
    mean = features.mean(axis=0)
    variance = np.maximum(features.var(axis=0), VARIANCE_FLOOR)
    logger.info(f"✅ Detector prior from {len(features)} boxes: mean dims {np.round(np.exp(mean[:3]), 2)}")
    return DetectorModel(mean, variance, score_threshold, len(features))


def baseline_train(frames: Sequence[Scan], labels: Sequence[LabelSet], cfg: DetectorConfig = DetectorConfig(),
                   ground_cfg: GroundConfig = GroundConfig()) -> DetectorModel:
    return GeometricDetector(cfg, ground_cfg).train(frames, labels)


def baseline_infer(model: DetectorModel, frame: Scan, cfg: DetectorConfig = DetectorConfig(),
                   ground_cfg: GroundConfig = GroundConfig()) -> LabelSet:
    return GeometricDetector(cfg, ground_cfg).infer(model, frame)


DETECTORS = {"baseline": GeometricDetector}


def make_detector(name: str, cfg: DetectorConfig, ground_cfg: GroundConfig):
    if name not in DETECTORS:
        raise ValueError(f"unknown detector '{name}'")
    return DETECTORS[name](cfg, ground_cfg)
