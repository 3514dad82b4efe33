#!/usr/bin/env python3
"""
Seed Label Generation
Scan + PP field -> conservative mobile-object boxes, with no detector involved:

  1. mutual k-NN graph over the scan, edges weighted by PP-score difference
  2. DBSCAN on that graph (eps-neighborhood = edges with weight <= eps)
  3. drop clusters whose alpha-percentile PP score exceeds gamma (persistent background)
  4. RANSAC ground, upright minimum-area box per cluster
  5. common-sense filters on point count, volume and height above ground
"""

import logging
import math
import warnings
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy.sparse import csr_matrix
from sklearn.cluster import DBSCAN
from sklearn.exceptions import EfficiencyWarning

from mobile_labeler.config import FilterConfig, PipelineConfig
from mobile_labeler.core.ephemerality import PPField
from mobile_labeler.core.ground import GroundPlane, estimate_ground
from mobile_labeler.errors import DataError, InvariantViolation
from mobile_labeler.ingest.lidar_io import Box, LabelSet, Scan, normalize_yaw
from mobile_labeler.utils.box_geometry import DEGENERATE_WIDTH, min_area_rectangle
from mobile_labeler.utils.spatial_index import build

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PPGraph:
    """Symmetric sparse graph in CSR form; row i lists neighbors of node i in ascending index order"""

    n_nodes: int
    indptr: np.ndarray
    indices: np.ndarray
    weights: np.ndarray
    k: int
    r_prime: float

    def neighbors(self, i: int):
        start, stop = self.indptr[i], self.indptr[i + 1]
        return self.indices[start:stop], self.weights[start:stop]

    @property
    def n_edges(self) -> int:
        return len(self.indices) // 2

    @property
    def adjacency(self) -> List[List[tuple]]:
        return [list(zip(*(a.tolist() for a in self.neighbors(i)))) for i in range(self.n_nodes)]


@dataclass(frozen=True)
class Cluster:
    indices: np.ndarray
    percentile_tau: Optional[float] = None
    height_min: Optional[float] = None
    height_max: Optional[float] = None

    @property
    def point_count(self) -> int:
        return len(self.indices)


@dataclass(frozen=True)
class FittedBox:
    box: Box
    degenerate: bool
    point_count: int
    height_min: float
    height_max: float


# ---------------------------------------------------------------- graph + clustering

def build_graph(
    points: np.ndarray,
    tau: Optional[np.ndarray],
    k: int = 70,
    r_prime: float = 2.0,
    max_workers: Optional[int] = None,
) -> PPGraph:
    """
    Mutual k-NN graph: edge (p, q) iff each is among the other's k nearest points closer than r_prime.
    Edge weight is |tau(p) - tau(q)|, or the Euclidean distance when tau is None.
    """
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    n = len(xyz)
    if tau is not None and len(tau) != n:
        raise DataError(f"PP field has {len(tau)} scores for {n} points")
    if n == 0:
        return PPGraph(0, np.zeros(1, dtype=np.int64), np.empty(0, dtype=np.int64), np.empty(0), k, r_prime)

    grid = build(xyz, r_prime)
    indptr, dst, d2 = grid.knn_within_batch(xyz, k, r_prime, exclude=np.arange(n), max_workers=max_workers)
    src = np.repeat(np.arange(n, dtype=np.int64), np.diff(indptr))

    forward = src * n + dst
    mutual = np.isin(forward, dst * n + src)
    src, dst, d2 = src[mutual], dst[mutual], d2[mutual]

    order = np.lexsort((dst, src))
    src, dst, d2 = src[order], dst[order], d2[order]
    if tau is None:
        weights = np.sqrt(d2)
    else:
        tau = np.asarray(tau, dtype=np.float64)
        weights = np.abs(tau[src] - tau[dst])

    if not np.array_equal(np.sort(src * n + dst), np.sort(dst * n + src)):
        raise InvariantViolation("mutual k-NN graph is not symmetric")

    indptr = np.concatenate([[0], np.cumsum(np.bincount(src, minlength=n))]).astype(np.int64)
    return PPGraph(n, indptr, dst, weights, k, r_prime)


def dbscan(graph: PPGraph, eps: float = 0.1, min_samples: int = 10) -> List[Cluster]:
    """
    DBSCAN over graph edges: a node's eps-neighborhood is itself plus the neighbors joined by an
    edge of weight <= eps. Clusters are numbered from the lowest-index core point; a border point
    stays with the first cluster that reaches it. Noise is dropped.
    """
    n = graph.n_nodes
    if n == 0:
        return []

    # explicit zero weights stay stored in the CSR matrix and count as neighbors
    distances = csr_matrix((graph.weights, graph.indices, graph.indptr), shape=(n, n))
    model = DBSCAN(eps=eps, min_samples=min_samples, metric="precomputed")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", EfficiencyWarning)
        labels = model.fit_predict(distances)

    members = np.flatnonzero(labels >= 0)
    order = members[np.argsort(labels[members], kind="stable")]
    splits = np.flatnonzero(np.diff(labels[order])) + 1
    clusters = [Cluster(group.astype(np.int64)) for group in np.split(order, splits) if len(group)]

    logger.debug(f"DBSCAN: {len(clusters)} clusters, {len(model.core_sample_indices_)} core / {n} points")
    return clusters


def nearest_rank_percentile(values: Sequence[float], alpha: float) -> float:
    """Sorted value at 1-based rank ceil(alpha / 100 * n), rank clamped to [1, n]"""
    ordered = np.sort(np.asarray(values, dtype=np.float64))
    if len(ordered) == 0:
        raise ValueError("percentile of an empty sample")
    rank = min(max(1, math.ceil(alpha * len(ordered) / 100.0)), len(ordered))
    return float(ordered[rank - 1])


def filter_clusters(clusters: Sequence[Cluster], tau: np.ndarray, cfg: FilterConfig) -> List[Cluster]:
    """Keep clusters whose alpha-percentile PP score is <= gamma"""
    tau = np.asarray(tau, dtype=np.float64)
    kept = []
    for cluster in clusters:
        percentile = nearest_rank_percentile(tau[cluster.indices], cfg.alpha)
        if percentile <= cfg.gamma:
            kept.append(replace(cluster, percentile_tau=percentile))
    return kept


# ---------------------------------------------------------------- boxes

def _plane_basis(normal: np.ndarray):
    u = np.array([1.0, 0.0, 0.0]) - normal[0] * normal
    if np.linalg.norm(u) < 1e-6:
        u = np.array([0.0, 1.0, 0.0]) - normal[1] * normal
    u /= np.linalg.norm(u)
    return u, np.cross(normal, u)


def fit_box(points: np.ndarray, ground: GroundPlane) -> FittedBox:
    """Upright box: minimum-area rectangle of the points projected on the ground, extruded over their heights"""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    if len(xyz) == 0:
        raise ValueError("cannot fit a box to zero points")

    normal = ground.normal
    u, v = _plane_basis(normal)
    rect = min_area_rectangle(np.column_stack([xyz @ u, xyz @ v]))
    heights = ground.height(xyz)
    h_min, h_max = float(heights.min()), float(heights.max())

    degenerate = rect.degenerate
    height = h_max - h_min
    if height < DEGENERATE_WIDTH:
        height = DEGENERATE_WIDTH
        degenerate = True

    s, t = rect.center
    center = -ground.d * normal + s * u + t * v + (h_min + h_max) / 2 * normal
    direction = math.cos(rect.angle) * u + math.sin(rect.angle) * v
    yaw = normalize_yaw(math.atan2(direction[1], direction[0]))

    box = Box(center[0], center[1], center[2], rect.length, rect.width, height, yaw)
    if degenerate:
        logger.debug(f"Degenerate box fit over {len(xyz)} points at ({center[0]:.1f}, {center[1]:.1f})")
    return FittedBox(box, degenerate, len(xyz), h_min, h_max)


def passes_common_sense(fitted: FittedBox, cfg: FilterConfig) -> bool:
    return (
        fitted.point_count >= cfg.min_points
        and cfg.volume_min <= fitted.box.volume <= cfg.volume_max
        and fitted.height_max > cfg.height_max_min
        and fitted.height_min < cfg.height_min_max
    )


def common_sense_filter(frame_id: str, fitted: Sequence[FittedBox], cfg: FilterConfig) -> LabelSet:
    kept = [fb for fb in fitted if passes_common_sense(fb, cfg)]
    return LabelSet(frame_id, [fb.box for fb in kept], kind="seed")


def check_seed_labels(clusters: Sequence[Cluster], labels: LabelSet, cfg: FilterConfig):
    """Post-hoc check that no persistent cluster or out-of-range box slipped through the filters"""
    for cluster in clusters:
        if cluster.percentile_tau is not None and cluster.percentile_tau > cfg.gamma:
            raise InvariantViolation(
                f"{labels.frame_id}: kept cluster has percentile PP {cluster.percentile_tau:.3f} > gamma {cfg.gamma}"
            )
    if len(labels) > len(clusters):
        raise InvariantViolation(f"{labels.frame_id}: {len(labels)} seed boxes from {len(clusters)} clusters")
    for box in labels.boxes:
        if not cfg.volume_min <= box.volume <= cfg.volume_max:
            raise InvariantViolation(f"{labels.frame_id}: seed box volume {box.volume:.2f} outside filter range")


# ---------------------------------------------------------------- per-scan chain

def generate_seed_labels(
    scan: Scan,
    ppfield: Optional[PPField],
    cfg: PipelineConfig,
    max_workers: Optional[int] = 1,
) -> LabelSet:
    """Seed LabelSet for one scan; scans without a PP field yield no seeds unless use_pp is off"""
    use_pp = cfg.seed_labels.use_pp
    if use_pp and ppfield is None:
        logger.debug(f"{scan.scan_id}: no PP field, no seeds")
        return LabelSet(scan.scan_id, [], kind="seed")
    if use_pp and len(ppfield) != len(scan):
        raise DataError(f"{scan.scan_id}: PP field has {len(ppfield)} scores for {len(scan)} points")

    xyz = scan.xyz
    ground = estimate_ground(xyz, cfg.ground)

    if use_pp:
        candidate = np.arange(len(xyz))
        graph = build_graph(xyz, ppfield.tau, cfg.graph.k, cfg.graph.r_prime, max_workers=max_workers)
        clusters = dbscan(graph, cfg.dbscan.eps, cfg.dbscan.min_samples)
        clusters = filter_clusters(clusters, ppfield.tau, cfg.filters)
    else:
        candidate = np.flatnonzero(ground.height(xyz) >= cfg.seed_labels.ground_clearance)
        graph = build_graph(xyz[candidate], None, cfg.graph.k, cfg.graph.r_prime, max_workers=max_workers)
        clusters = dbscan(graph, cfg.seed_labels.no_pp_eps, cfg.dbscan.min_samples)

    fitted = [fit_box(xyz[candidate[c.indices]], ground) for c in clusters]
    labels = common_sense_filter(scan.scan_id, fitted, cfg.filters)
    check_seed_labels(clusters, labels, cfg.filters)
    logger.debug(f"{scan.scan_id}: {len(clusters)} clusters -> {len(labels)} seed boxes")
    return labels
