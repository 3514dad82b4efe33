#!/usr/bin/env python3
"""
Self-Training Loop
D_0 is trained on the seed labels; every round re-labels the pool with the previous detector,
drops persistent-background boxes by PP score, and trains the next detector from scratch.
"""

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Union

from mobile_labeler.config import FilterConfig, PipelineConfig
from mobile_labeler.core.detector import DetectorContract
from mobile_labeler.core.ephemerality import PPField
from mobile_labeler.core.evaluate import label_quality
from mobile_labeler.core.seed_labels import nearest_rank_percentile
from mobile_labeler.errors import DataError, FrameMismatchError, SelfTrainError
from mobile_labeler.ingest.lidar_io import LabelSet, Scan, write_labels
from mobile_labeler.utils.atomic_write import atomic_write_text
from mobile_labeler.utils.box_geometry import points_in_box
from mobile_labeler.utils.parallel_execution import run_parallel

logger = logging.getLogger(__name__)


@dataclass
class SelfTrainState:
    round_index: int
    labels: List[LabelSet]
    history: List[Dict] = field(default_factory=list)

    def summary(self) -> Dict:
        return {
            "rounds_completed": self.round_index,
            "frames": len(self.labels),
            "boxes": sum(len(ls) for ls in self.labels),
            "history": self.history,
        }


def filter_by_pp(
    labels: Sequence[LabelSet],
    scans: Mapping[str, Scan],
    ppfields: Mapping[str, PPField],
    cfg: FilterConfig,
) -> List[LabelSet]:
    """Drop boxes over persistent points; frames without a PP field pass through unchanged"""
    filtered = []
    for label_set in labels:
        ppfield = ppfields.get(label_set.frame_id)
        if ppfield is None or not label_set.boxes:
            filtered.append(label_set)
            continue
        xyz = scans[label_set.frame_id].xyz
        kept = []
        for box in label_set.boxes:
            inside = points_in_box(xyz, box)
            if inside.any() and nearest_rank_percentile(ppfield.tau[inside], cfg.alpha) <= cfg.gamma:
                kept.append(box)
        filtered.append(label_set.with_boxes(kept))
    return filtered


def seed_prefix(seed: Sequence[LabelSet], fraction: float) -> List[LabelSet]:
    """Keep seeds only on the first ceil(fraction * n) frames by sorted frame id; the rest become empty"""
    keep = set(sorted(ls.frame_id for ls in seed)[: math.ceil(fraction * len(seed))])
    return [ls if ls.frame_id in keep else ls.with_boxes([]) for ls in seed]


def _align(pool: Sequence[Scan], labels: Sequence[LabelSet], kind: str) -> List[LabelSet]:
    by_frame = {ls.frame_id: ls for ls in labels}
    unknown = set(by_frame) - {scan.scan_id for scan in pool}
    if unknown:
        raise DataError(f"labels reference frames outside the pool: {sorted(unknown)[:10]}")
    return [by_frame.get(scan.scan_id, LabelSet(scan.scan_id, [], kind)) for scan in pool]


def _round_metrics(labels, ground_truth, cfg: PipelineConfig) -> Optional[Dict]:
    if ground_truth is None:
        return None
    missing = [ls.frame_id for ls in labels if ls.frame_id not in ground_truth]
    if missing:
        raise FrameMismatchError(missing)
    truth = [ground_truth[ls.frame_id] for ls in labels]
    return label_quality(labels, truth, cfg.eval)


def _write_round(out_dir: Optional[Path], round_index: int, labels: List[LabelSet], metrics: Dict):
    if out_dir is None:
        return
    round_dir = out_dir / f"round_{round_index}"
    write_labels(round_dir / "labels.jsonl", labels)
    atomic_write_text(round_dir / "metrics.json", json.dumps(metrics, indent=2, sort_keys=True))


def self_train_loop(
    pool: Sequence[Scan],
    seed: Sequence[LabelSet],
    detector: DetectorContract,
    rounds: int,
    cfg: PipelineConfig,
    ppfields: Optional[Mapping[str, PPField]] = None,
    ground_truth: Optional[Mapping[str, LabelSet]] = None,
    pp_filter: Optional[bool] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> SelfTrainState:
    if rounds < 0:
        raise ValueError("rounds must be >= 0")
    if not seed:
        raise DataError("self-training needs a non-empty seed label set")
    pp_filter = cfg.self_training.pp_filter if pp_filter is None else pp_filter
    ppfields = ppfields or {}
    out_dir = Path(out_dir) if out_dir is not None else None
    scans = {scan.scan_id: scan for scan in pool}

    labels = _align(pool, seed_prefix(seed, cfg.self_training.seed_fraction), "seed")
    state = SelfTrainState(0, labels)
    metrics = {"round": 0, "boxes": sum(len(ls) for ls in labels), "labels": _round_metrics(labels, ground_truth, cfg)}
    state.history.append(metrics)
    _write_round(out_dir, 0, labels, metrics)
    logger.info(f"🚀 Self-training on {len(pool)} frames, {metrics['boxes']} seed boxes, {rounds} round(s)")

    try:
        model = detector.train(pool, labels)
    except Exception as e:
        raise SelfTrainError(0, e) from e

    for j in range(1, rounds + 1):
        start_time = time.time()
        try:
            raw = run_parallel(lambda frame: detector.infer(model, frame), pool, description=f"round {j} inference")
        except Exception as e:
            raise SelfTrainError(j, e) from e

        raw = [ls.with_boxes(ls.boxes, kind="detection") for ls in raw]
        kept = filter_by_pp(raw, scans, ppfields, cfg.filters) if pp_filter else raw
        labels = [ls.with_boxes(ls.boxes, kind="pseudo") for ls in kept]

        metrics = {
            "round": j,
            "boxes": sum(len(ls) for ls in labels),
            "unfiltered_boxes": sum(len(ls) for ls in raw),
            "labels": _round_metrics(labels, ground_truth, cfg),
            "unfiltered": _round_metrics(raw, ground_truth, cfg),
        }
        state = SelfTrainState(j, labels, state.history + [metrics])
        _write_round(out_dir, j, labels, metrics)

        try:
            model = detector.train(pool, labels)
        except Exception as e:
            raise SelfTrainError(j, e) from e
        logger.info(
            f"✅ Round {j}: {metrics['unfiltered_boxes']} detections -> {metrics['boxes']} pseudo-labels "
            f"in {time.time() - start_time:.1f}s"
        )

    if out_dir is not None:
        atomic_write_text(out_dir / "state.json", json.dumps(state.summary(), indent=2, sort_keys=True))
    return state
