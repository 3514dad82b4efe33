#!/usr/bin/env python3
"""
Ephemerality Scoring
Per-point persistence scores from multi-traversal neighborhood counts.

For a query point q and T traversals, N_t(q) counts the points of traversal t's dense cloud
within r of q. The score is the entropy of N_t / sum(N) normalized by log T: close to 1 when
every traversal sees something at q (static background), close to 0 when only one does.
"""

import json
import logging
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Hashable, List, Optional, Sequence, Union

import numpy as np
from scipy.stats import entropy

from mobile_labeler.config import AggregationWindow, EphemeralityConfig
from mobile_labeler.errors import (
    DataError,
    EmptySelectionError,
    FormatError,
    InsufficientTraversalsError,
)
from mobile_labeler.ingest.lidar_io import Dataset, Scan, Traversal, to_world
from mobile_labeler.utils.atomic_write import atomic_write_bytes, atomic_write_text
from mobile_labeler.utils.parallel_execution import run_parallel
from mobile_labeler.utils.spatial_index import VoxelGrid, build

logger = logging.getLogger(__name__)

PPF_MAGIC = b"PPF1"
PPF_HEADER_BYTES = 8
PP_INDEX_FILE = "index.json"


@dataclass(frozen=True)
class DenseCloud:
    """
    World-frame aggregate of one traversal's scans around a location.

    A cloud cut from a TraversalCloud shares the traversal-wide grid; `mask` then marks the
    grid points that belong to the selected scans and only those are counted.
    """

    traversal_id: str
    points: np.ndarray
    grid: VoxelGrid
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.grid.points.shape != self.points.shape:
            raise ValueError("dense cloud grid does not index its own points")
        if self.mask is not None and self.mask.shape != (len(self.points),):
            raise ValueError("dense cloud mask does not cover its points")

    def __len__(self) -> int:
        return len(self.points) if self.mask is None else int(self.mask.sum())

    def count_within_batch(self, queries: np.ndarray, r: float, max_workers: Optional[int] = None) -> np.ndarray:
        return self.grid.count_within_batch(queries, r, max_workers=max_workers, mask=self.mask)


@dataclass(frozen=True)
class PPField:
    scan_id: str
    tau: np.ndarray
    traversal_count: int

    def __post_init__(self):
        tau = np.array(self.tau, dtype=np.float64).reshape(-1)
        if not np.isfinite(tau).all() or (tau < 0).any() or (tau > 1).any():
            raise DataError(f"PP field for {self.scan_id} has scores outside [0, 1]")
        if self.traversal_count < 2:
            raise InsufficientTraversalsError(f"PP field for {self.scan_id} built from {self.traversal_count} traversal(s)")
        tau.flags.writeable = False
        object.__setattr__(self, "tau", tau)

    def __len__(self) -> int:
        return len(self.tau)


# ---------------------------------------------------------------- aggregation

def select_scans(
    traversal: Traversal,
    c: np.ndarray,
    window: AggregationWindow,
    heading: Optional[np.ndarray] = None,
) -> List[Scan]:
    """Scans of one traversal inside the window around c, greedily spaced in traversal order"""
    c = np.asarray(c, dtype=np.float64)
    if window.forward_only:
        if heading is None:
            raise ValueError("forward_only window needs the query heading")
        heading = np.asarray(heading, dtype=np.float64)
        heading = heading / np.linalg.norm(heading)

    selected: List[Scan] = []
    last_position = None
    for scan in traversal.scans:
        offset = scan.ego_position - c
        distance = float(np.linalg.norm(offset))
        if window.forward_only:
            ahead = float(offset @ heading)
            inside = window.h_start <= ahead <= window.h_end and distance <= window.h_end
        else:
            inside = max(0.0, window.h_start) <= distance <= window.h_end
        if not inside:
            continue
        if last_position is not None and np.linalg.norm(scan.ego_position - last_position) < window.spacing:
            continue
        selected.append(scan)
        last_position = scan.ego_position
    return selected


def build_dense_cloud(selected: Sequence[Scan], r: float, traversal_id: Optional[str] = None) -> DenseCloud:
    if not selected:
        raise EmptySelectionError(f"traversal {traversal_id or '?'} has no scans in the aggregation window")
    points = np.concatenate([to_world(scan) for scan in selected])
    return DenseCloud(traversal_id or selected[0].traversal_id, points, build(points, r))


class TraversalCloud:
    """Every scan of one traversal in world frame under one grid; a scan selection becomes a point mask"""

    def __init__(self, traversal: Traversal, r: float):
        world = [to_world(scan) for scan in traversal.scans]
        self.traversal_id = traversal.traversal_id
        self.grid = build(np.concatenate(world) if world else np.empty((0, 3)), r)
        self.points = self.grid.points
        self.position = {scan.scan_id: i for i, scan in enumerate(traversal.scans)}
        self.owner = np.repeat(np.arange(len(world)), [len(w) for w in world])

    def __len__(self) -> int:
        return len(self.points)

    def select(self, selected: Sequence[Scan]) -> DenseCloud:
        """Same neighborhood counts as build_dense_cloud(selected) without rebuilding a grid"""
        if not selected:
            raise EmptySelectionError(f"traversal {self.traversal_id} has no scans in the aggregation window")
        chosen = np.zeros(len(self.position), dtype=bool)
        chosen[[self.position[scan.scan_id] for scan in selected]] = True
        return DenseCloud(self.traversal_id, self.points, self.grid, mask=chosen[self.owner])


class DenseCloudCache:
    """LRU of dense clouds keyed by the selected scan ids, for traversals too large for a shared grid"""

    def __init__(self, max_size: int = 16):
        self.cache: "OrderedDict[Hashable, DenseCloud]" = OrderedDict()
        self.max_size = max_size
        self.hits = 0
        self.misses = 0
        self.lock = threading.RLock()

    def get(self, key: Hashable) -> Optional[DenseCloud]:
        with self.lock:
            cloud = self.cache.get(key)
            if cloud is not None:
                self.cache.move_to_end(key)
                self.hits += 1
            return cloud

    def set(self, key: Hashable, cloud: DenseCloud):
        with self.lock:
            self.cache[key] = cloud
            self.cache.move_to_end(key)
            while len(self.cache) > self.max_size:
                self.cache.popitem(last=False)

    def get_or_build(self, key: Hashable, builder: Callable[[], DenseCloud]) -> DenseCloud:
        cloud = self.get(key)
        if cloud is None:
            with self.lock:
                self.misses += 1
            cloud = builder()
            self.set(key, cloud)
        return cloud

    def clear(self):
        with self.lock:
            self.cache.clear()


# ---------------------------------------------------------------- scoring

def persistence_scores(counts: np.ndarray, base: Optional[float] = None) -> np.ndarray:
    """Normalized entropy of each row of an (n, T) count matrix; all-zero rows score 0"""
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] < 2:
        raise InsufficientTraversalsError("PP score needs counts from at least two traversals")
    if (counts < 0).any():
        raise ValueError("neighborhood counts must be non-negative")

    n_traversals = counts.shape[1]
    normalizer = np.log(n_traversals) if base is None else np.log(n_traversals) / np.log(base)
    tau = np.zeros(len(counts))
    observed = counts.sum(axis=1) > 0
    if observed.any():
        # scipy normalizes each row and treats 0 * log 0 as 0
        tau[observed] = entropy(counts[observed], base=base, axis=1) / normalizer
    return np.clip(tau, 0.0, 1.0)


def neighborhood_counts(query: Scan, clouds: Sequence[DenseCloud], r: float, max_workers: Optional[int] = None) -> np.ndarray:
    world = to_world(query)
    return np.column_stack([cloud.count_within_batch(world, r, max_workers=max_workers) for cloud in clouds])


def pp_score(query: Scan, clouds: Sequence[DenseCloud], r: float = 0.3, max_workers: Optional[int] = None) -> PPField:
    if len(clouds) < 2:
        raise InsufficientTraversalsError(f"PP score needs >= 2 traversals, got {len(clouds)}")
    counts = neighborhood_counts(query, clouds, r, max_workers=max_workers)
    return PPField(query.scan_id, persistence_scores(counts), len(clouds))


def _traversals_for(query: Scan, dataset: Dataset, cfg: EphemeralityConfig) -> List[Traversal]:
    own = [t for t in dataset.traversals if t.traversal_id == query.traversal_id]
    others = [t for t in dataset.traversals if t.traversal_id != query.traversal_id]
    chosen = own if cfg.include_own_traversal else []
    if cfg.max_traversals is not None:
        others = others[: max(cfg.max_traversals - len(chosen), 0)]
    return chosen + others


def compute_pp_fields(
    dataset: Dataset,
    cfg: EphemeralityConfig,
    cache: Optional[DenseCloudCache] = None,
    max_workers: Optional[int] = None,
) -> Dict[str, PPField]:
    """
    PP field for every scan that has at least two contributing traversals.

    Traversals up to cfg.shared_grid_max_points are indexed once and every query masks its
    window selection out of that grid; larger ones build a dense cloud per selection through
    the LRU cache. Scans are scored in parallel; results do not depend on the worker count.
    """
    if len(dataset.traversals) < 2:
        raise InsufficientTraversalsError(f"dataset has {len(dataset.traversals)} traversal(s); PP score needs >= 2")
    cache = cache or DenseCloudCache()
    start_time = time.time()

    shared_ids = [
        t.traversal_id for t in dataset.traversals
        if 0 < sum(len(scan) for scan in t.scans) <= cfg.shared_grid_max_points
    ]
    by_id = {t.traversal_id: t for t in dataset.traversals}
    built = run_parallel(lambda tid: TraversalCloud(by_id[tid], cfg.r), shared_ids, max_workers=max_workers)
    shared: Dict[str, TraversalCloud] = dict(zip(shared_ids, built))

    def cloud_for(traversal: Traversal, selected: List[Scan]) -> DenseCloud:
        if traversal.traversal_id in shared:
            return shared[traversal.traversal_id].select(selected)
        key = (traversal.traversal_id, tuple(scan.scan_id for scan in selected))
        return cache.get_or_build(key, lambda: build_dense_cloud(selected, cfg.r, traversal.traversal_id))

    def score(query: Scan) -> Optional[PPField]:
        heading = query.pose.rotation[:, 0]
        clouds = []
        for traversal in _traversals_for(query, dataset, cfg):
            selected = select_scans(traversal, query.ego_position, cfg.window, heading=heading)
            if selected:
                clouds.append(cloud_for(traversal, selected))
        if len(clouds) < 2:
            logger.warning(f"⚠️ {query.scan_id}: only {len(clouds)} traversal(s) near this location, no PP field")
            return None
        field = pp_score(query, clouds, cfg.r, max_workers=1)
        logger.debug(f"{query.scan_id}: T={len(clouds)}, mean tau {field.tau.mean():.3f}")
        return field

    results = run_parallel(score, dataset.scans, max_workers=max_workers, description="PP scores")
    fields = {scan.scan_id: field for scan, field in zip(dataset.scans, results) if field is not None}

    logger.info(
        f"✅ PP fields for {len(fields)}/{len(dataset.scans)} scans in {time.time() - start_time:.1f}s "
        f"({len(shared)} shared traversal grids, cloud cache {cache.hits} hits / {cache.misses} builds)"
    )
    return fields


# ---------------------------------------------------------------- PPF sidecars

def encode_ppf(field: PPField) -> bytes:
    header = PPF_MAGIC + np.array([len(field.tau)], dtype="<u4").tobytes()
    return header + field.tau.astype("<f4").tobytes()


def write_ppf(path: Union[str, Path], field: PPField):
    atomic_write_bytes(path, encode_ppf(field))


def read_ppf(
    path: Union[str, Path],
    scan_id: Optional[str] = None,
    traversal_count: int = 2,
    expected_count: Optional[int] = None,
) -> PPField:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < PPF_HEADER_BYTES or raw[:4] != PPF_MAGIC:
        raise FormatError("missing PPF1 header", path=str(path), byte_offset=0)
    count = int(np.frombuffer(raw[4:8], dtype="<u4")[0])
    payload = raw[PPF_HEADER_BYTES:]
    if len(payload) != 4 * count:
        raise FormatError(
            f"payload holds {len(payload)} bytes, header announces {count} scores",
            path=str(path),
            byte_offset=PPF_HEADER_BYTES + min(len(payload), 4 * count),
        )
    if expected_count is not None and count != expected_count:
        raise FormatError(f"{count} scores for a scan of {expected_count} points", path=str(path))
    tau = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    return PPField(scan_id or path.stem, np.clip(tau, 0.0, 1.0), traversal_count)


def write_pp_fields(directory: Union[str, Path], fields: Dict[str, PPField], r: float):
    directory = Path(directory)
    for scan_id, field in fields.items():
        write_ppf(directory / f"{scan_id}.ppf", field)
    index = {"r": r, "fields": {scan_id: field.traversal_count for scan_id, field in fields.items()}}
    atomic_write_text(directory / PP_INDEX_FILE, json.dumps(index, indent=2))


def load_pp_fields(directory: Union[str, Path], dataset: Optional[Dataset] = None) -> Dict[str, PPField]:
    """Read the sidecars listed in index.json; point counts are checked against the dataset when given"""
    directory = Path(directory)
    index_path = directory / PP_INDEX_FILE
    if not index_path.exists():
        raise DataError(f"{directory}: no {PP_INDEX_FILE}, run ppscore first")
    with open(index_path, "r") as f:
        index = json.load(f)

    scans = dataset.scan_by_id() if dataset else {}
    fields = {}
    for scan_id, traversal_count in index["fields"].items():
        expected = len(scans[scan_id]) if scan_id in scans else None
        fields[scan_id] = read_ppf(directory / f"{scan_id}.ppf", scan_id, traversal_count, expected)
    return fields
