"""
Box Geometry Helpers
BEV corners, point-in-box tests and minimum-area enclosing rectangles (rotating calipers)
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import ConvexHull, QhullError

from mobile_labeler.ingest.lidar_io import Box, normalize_yaw

logger = logging.getLogger(__name__)

DEGENERATE_WIDTH = 0.05
COLLINEAR_TOLERANCE = 1e-9


def bev_corners(box: Box) -> np.ndarray:
    """(4, 2) rectangle corners, counterclockwise"""
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    half = np.array([[1, 1], [-1, 1], [-1, -1], [1, -1]]) * [box.l / 2, box.w / 2]
    rotation = np.array([[c, -s], [s, c]])
    return half @ rotation.T + [box.cx, box.cy]


def points_in_box(points: np.ndarray, box: Box) -> np.ndarray:
    """Mask of points strictly inside the BEV rectangle and within the closed vertical extent"""
    points = np.asarray(points, dtype=np.float64)
    dx = points[:, 0] - box.cx
    dy = points[:, 1] - box.cy
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    along = dx * c + dy * s
    across = -dx * s + dy * c
    z = points[:, 2]
    return (
        (np.abs(along) < box.l / 2)
        & (np.abs(across) < box.w / 2)
        & (z >= box.z_min)
        & (z <= box.z_max)
    )


@dataclass(frozen=True)
class Rectangle:
    """Oriented 2D rectangle; angle is the direction of the length side, in [-pi/2, pi/2)"""

    center: np.ndarray
    length: float
    width: float
    angle: float
    degenerate: bool = False

    @property
    def area(self) -> float:
        return self.length * self.width


def _oriented(center, side_a: float, side_b: float, angle_a: float, degenerate: bool) -> Rectangle:
    if side_b > side_a:
        side_a, side_b = side_b, side_a
        angle_a += math.pi / 2
    if degenerate:
        side_b = max(side_b, DEGENERATE_WIDTH)
        side_a = max(side_a, DEGENERATE_WIDTH)
    return Rectangle(np.asarray(center, dtype=np.float64), float(side_a), float(side_b), normalize_yaw(angle_a), degenerate)


def _collinear_rectangle(xy: np.ndarray) -> Rectangle:
    centered = xy - xy.mean(axis=0)
    if not np.any(centered):
        return _oriented(xy[0], 0.0, 0.0, 0.0, True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axis = vt[0]
    along = centered @ axis
    mid = (along.max() + along.min()) / 2
    center = xy.mean(axis=0) + mid * axis
    return _oriented(center, along.max() - along.min(), 0.0, math.atan2(axis[1], axis[0]), True)


def min_area_rectangle(xy: np.ndarray) -> Rectangle:
    """Smallest-area enclosing rectangle; collinear input yields a flagged sliver rectangle"""
    xy = np.asarray(xy, dtype=np.float64).reshape(-1, 2)
    if len(xy) == 0:
        raise ValueError("min_area_rectangle needs at least one point")

    centered = xy - xy.mean(axis=0)
    singular = np.linalg.svd(centered, compute_uv=False) if len(xy) > 1 else np.zeros(2)
    if len(xy) < 3 or singular[-1] <= COLLINEAR_TOLERANCE * max(1.0, singular[0]):
        return _collinear_rectangle(xy)

    try:
        hull = xy[ConvexHull(xy).vertices]
    except QhullError:
        return _collinear_rectangle(xy)

    edges = np.roll(hull, -1, axis=0) - hull
    angles = np.arctan2(edges[:, 1], edges[:, 0])
    cos, sin = np.cos(angles), np.sin(angles)
    # hull coordinates in every edge-aligned frame: (n_edges, n_hull)
    along = np.outer(cos, hull[:, 0]) + np.outer(sin, hull[:, 1])
    across = -np.outer(sin, hull[:, 0]) + np.outer(cos, hull[:, 1])
    extent_a = along.max(axis=1) - along.min(axis=1)
    extent_b = across.max(axis=1) - across.min(axis=1)
    best = int(np.argmin(extent_a * extent_b))

    mid_a = (along[best].max() + along[best].min()) / 2
    mid_b = (across[best].max() + across[best].min()) / 2
    center = mid_a * np.array([cos[best], sin[best]]) + mid_b * np.array([-sin[best], cos[best]])
    return _oriented(center, extent_a[best], extent_b[best], angles[best], False)
