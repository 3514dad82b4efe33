"""
Ground Plane Estimation
Seeded RANSAC over near-horizontal planes, refined by least squares on the inliers
"""

import logging
from dataclasses import dataclass

import numpy as np

from mobile_labeler.config import GroundConfig

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class GroundPlane:
    """Plane n.x + d = 0 with n pointing up; fallback marks the configured z = -sensor_height plane"""

    normal: np.ndarray
    d: float
    inlier_fraction: float
    fallback: bool = False

    def __post_init__(self):
        normal = np.asarray(self.normal, dtype=np.float64).reshape(3)
        normal = normal / np.linalg.norm(normal)
        if normal[2] < 0:
            normal, d = -normal, -self.d
            object.__setattr__(self, "d", float(d))
        object.__setattr__(self, "normal", normal)

    def height(self, points: np.ndarray) -> np.ndarray:
        """Signed distance above the plane"""
        return np.asarray(points, dtype=np.float64) @ self.normal + self.d


def fallback_plane(cfg: GroundConfig, inlier_fraction: float = 0.0) -> GroundPlane:
    return GroundPlane(np.array([0.0, 0.0, 1.0]), cfg.sensor_height, inlier_fraction, fallback=True)


def estimate_ground(points: np.ndarray, cfg: GroundConfig = GroundConfig()) -> GroundPlane:
    """RANSAC ground for an (N, 3) sensor-frame cloud; deterministic for a given cfg.seed"""
    xyz = np.asarray(points, dtype=np.float64)[:, :3]
    n = len(xyz)
    if n < cfg.min_points:
        logger.warning(f"⚠️ {n} points is too few for RANSAC ground, using z = -{cfg.sensor_height} fallback")
        return fallback_plane(cfg)

    rng = np.random.default_rng(cfg.seed)
    samples = np.stack([rng.choice(n, size=3, replace=False) for _ in range(cfg.iterations)])
    p0, p1, p2 = xyz[samples[:, 0]], xyz[samples[:, 1]], xyz[samples[:, 2]]
    normals = np.cross(p1 - p0, p2 - p0)
    norms = np.linalg.norm(normals, axis=1)
    valid = norms > 1e-9
    normals[valid] /= norms[valid, None]
    normals[normals[:, 2] < 0] *= -1
    valid &= normals[:, 2] > cfg.min_normal_z
    if not valid.any():
        logger.warning("⚠️ no near-horizontal plane hypothesis, using ground fallback")
        return fallback_plane(cfg)

    offsets = -np.einsum("ij,ij->i", normals, p0)
    residuals = np.abs(xyz @ normals[valid].T + offsets[valid])
    inlier_counts = (residuals < cfg.inlier_threshold).sum(axis=0)
    best = int(np.argmax(inlier_counts))
    inliers = residuals[:, best] < cfg.inlier_threshold
    fraction = inliers.sum() / n

    if fraction < cfg.min_inlier_fraction:
        logger.warning(f"⚠️ ground inlier fraction {fraction:.2f} < {cfg.min_inlier_fraction}, using fallback")
        return fallback_plane(cfg, fraction)

    # least-squares refinement on the consensus set
    support = xyz[inliers]
    centroid = support.mean(axis=0)
    _, _, vt = np.linalg.svd(support - centroid, full_matrices=False)
    normal = vt[-1] if vt[-1][2] >= 0 else -vt[-1]
    if normal[2] <= cfg.min_normal_z:
        normal = normals[valid][best]
    d = -float(normal @ centroid)
    fraction = float((np.abs(xyz @ normal + d) < cfg.inlier_threshold).mean())

    logger.debug(f"Ground normal {np.round(normal, 4)}, d={d:.3f}, inliers {fraction:.1%}")
    return GroundPlane(normal, d, fraction)
