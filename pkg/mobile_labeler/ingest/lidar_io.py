#!/usr/bin/env python3
"""
LiDAR Data Model and File Formats
Scans, poses, traversals and label sets, plus their on-disk codecs:
  - scans:  KITTI-compatible binary, 4 little-endian float32 per point (x, y, z, intensity)
  - poses:  text, one line per scan: scan_id + 12 floats (row-major 3x4 world-from-sensor)
  - labels: JSON-lines, one LabelSet per line
"""

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Union

import numpy as np

from mobile_labeler.errors import (
    DataError,
    FormatError,
    LabelParseError,
    LabelValidationError,
    PoseError,
    RecordError,
)
from mobile_labeler.utils.atomic_write import atomic_open, atomic_write_bytes

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

POINT_DTYPE = np.dtype("<f4")
POINT_RECORD_BYTES = 16
ORTHONORMAL_TOLERANCE = 1e-6
POSE_DRIFT_TOLERANCE = 1e-3
LABEL_KINDS = ("seed", "pseudo", "detection", "ground_truth")
BOX_KEYS = ("cx", "cy", "cz", "l", "w", "h", "yaw")


def _frozen(array: np.ndarray) -> np.ndarray:
    array.flags.writeable = False
    return array


def normalize_yaw(yaw: float) -> float:
    """Map a BEV yaw into [-pi/2, pi/2); heading is ambiguous mod pi"""
    if -math.pi / 2 <= yaw < math.pi / 2:
        return float(yaw)
    wrapped = math.fmod(yaw + math.pi / 2, math.pi)
    if wrapped < 0:
        wrapped += math.pi
    wrapped -= math.pi / 2
    # fmod rounding can land exactly on the open end
    return float(wrapped) if wrapped < math.pi / 2 else -math.pi / 2


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-sensor transform"""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        rotation = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.array(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(rotation).all() and np.isfinite(translation).all()):
            raise PoseError("pose contains non-finite values")
        if not np.allclose(rotation @ rotation.T, np.eye(3), atol=ORTHONORMAL_TOLERANCE):
            raise PoseError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOLERANCE:
            raise PoseError("rotation determinant is not +1 (reflections are not poses)")
        object.__setattr__(self, "rotation", _frozen(rotation))
        object.__setattr__(self, "translation", _frozen(translation))

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_yaw(cls, yaw: float, translation=(0.0, 0.0, 0.0)) -> "Pose":
        c, s = math.cos(yaw), math.sin(yaw)
        return cls(np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]), np.asarray(translation, dtype=float))

    @classmethod
    def from_matrix(cls, matrix: np.ndarray, tolerance: float = POSE_DRIFT_TOLERANCE) -> "Pose":
        """Build from a 3x4 [R|t]; rotation drift up to tolerance is re-orthonormalized"""
        matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 4)
        rotation, translation = matrix[:, :3], matrix[:, 3]
        if np.linalg.det(rotation) <= 0:
            raise PoseError("rotation determinant is not positive (reflection or singular)")
        drift = np.abs(rotation @ rotation.T - np.eye(3)).max()
        if drift > tolerance:
            raise PoseError(f"rotation drift {drift:.2e} exceeds tolerance {tolerance:.0e}")
        if drift > 0:
            u, _, vt = np.linalg.svd(rotation)
            rotation = u @ vt
        return cls(rotation, translation)

    def as_matrix(self) -> np.ndarray:
        return np.hstack([self.rotation, self.translation[:, None]])

    def compose(self, other: "Pose") -> "Pose":
        """self ∘ other: apply other first, then self"""
        return Pose(self.rotation @ other.rotation, self.rotation @ other.translation + self.translation)

    def inverse(self) -> "Pose":
        inv_rotation = self.rotation.T
        return Pose(inv_rotation, -inv_rotation @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    @property
    def yaw(self) -> float:
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])


@dataclass(frozen=True)
class Scan:
    """One LiDAR sweep; points is an (N, 4) float64 array of x, y, z, intensity in sensor frame"""

    scan_id: str
    points: np.ndarray
    pose: Pose
    traversal_id: str

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 4:
            raise DataError(f"scan {self.scan_id}: points must be (N, 4), got {points.shape}")
        if len(points) == 0:
            raise DataError(f"scan {self.scan_id}: empty point array")
        bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
        if len(bad):
            raise RecordError(f"scan {self.scan_id}: non-finite value", bad)
        points[:, 3] = np.clip(points[:, 3], 0.0, 1.0)
        object.__setattr__(self, "points", _frozen(points))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def ego_position(self) -> np.ndarray:
        return self.pose.translation

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class Traversal:
    traversal_id: str
    scans: List[Scan]

    def __post_init__(self):
        seen = set()
        for scan in self.scans:
            if scan.scan_id in seen:
                raise DataError(f"traversal {self.traversal_id}: duplicated scan_id {scan.scan_id}")
            if scan.traversal_id != self.traversal_id:
                raise DataError(f"scan {scan.scan_id} belongs to {scan.traversal_id}, not {self.traversal_id}")
            seen.add(scan.scan_id)
        object.__setattr__(self, "scans", list(self.scans))


@dataclass(frozen=True)
class Box:
    """Upright 3D box; yaw is the BEV rotation of the length axis, kept in [-pi/2, pi/2)"""

    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    score: Optional[float] = None

    def __post_init__(self):
        values = [self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw]
        if not all(math.isfinite(v) for v in values):
            raise LabelValidationError(f"box has non-finite fields: {values}")
        for name in ("l", "w", "h"):
            if not getattr(self, name) > 0:
                raise LabelValidationError(f"box dimension {name} must be > 0, got {getattr(self, name)}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise LabelValidationError(f"box score must be in [0, 1], got {self.score}")
        for name in ("cx", "cy", "cz", "l", "w", "h"):
            object.__setattr__(self, name, float(getattr(self, name)))
        object.__setattr__(self, "yaw", normalize_yaw(float(self.yaw)))
        if self.score is not None:
            object.__setattr__(self, "score", float(self.score))

    @property
    def volume(self) -> float:
        return self.l * self.w * self.h

    @property
    def z_min(self) -> float:
        return self.cz - self.h / 2

    @property
    def z_max(self) -> float:
        return self.cz + self.h / 2

    @property
    def bev_distance(self) -> float:
        """Distance of the box center from the sensor origin in BEV"""
        return math.hypot(self.cx, self.cy)

    def to_dict(self) -> Dict[str, float]:
        data = {key: getattr(self, key) for key in BOX_KEYS}
        if self.score is not None:
            data["score"] = self.score
        return data


@dataclass(frozen=True)
class LabelSet:
    frame_id: str
    boxes: List[Box] = field(default_factory=list)
    kind: str = "seed"

    def __post_init__(self):
        if self.kind not in LABEL_KINDS:
            raise LabelValidationError(f"unknown label kind '{self.kind}'")
        object.__setattr__(self, "boxes", list(self.boxes))

    def __len__(self) -> int:
        return len(self.boxes)

    def with_boxes(self, boxes: Iterable[Box], kind: Optional[str] = None) -> "LabelSet":
        return LabelSet(self.frame_id, list(boxes), kind or self.kind)


@dataclass
class Dataset:
    """A loaded data directory: traversals, optional ground truth, and the manifest that binds them"""

    root: Path
    traversals: List[Traversal]
    ground_truth: Dict[str, LabelSet]
    manifest: Dict

    @property
    def scans(self) -> List[Scan]:
        return [scan for traversal in self.traversals for scan in traversal.scans]

    def scan_by_id(self) -> Dict[str, Scan]:
        return {scan.scan_id: scan for scan in self.scans}


# ---------------------------------------------------------------- scans

def load_scan(path: PathLike, pose: Pose, scan_id: str, traversal_id: str) -> Scan:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) == 0:
        raise FormatError("empty scan file (zero points)", path=str(path))
    remainder = len(raw) % POINT_RECORD_BYTES
    if remainder:
        raise FormatError(
            f"file length {len(raw)} is not a multiple of {POINT_RECORD_BYTES} bytes, truncated record",
            path=str(path),
            byte_offset=len(raw) - remainder,
        )

    points = np.frombuffer(raw, dtype=POINT_DTYPE).reshape(-1, 4).astype(np.float64)
    bad = np.flatnonzero(~np.isfinite(points).all(axis=1))
    if len(bad):
        raise RecordError("non-finite value", bad, path=str(path))
    return Scan(scan_id=scan_id, points=points, pose=pose, traversal_id=traversal_id)


def encode_points(points: np.ndarray) -> bytes:
    points = np.asarray(points, dtype=np.float64)
    if points.shape[1] == 3:
        points = np.hstack([points, np.zeros((len(points), 1))])
    return np.ascontiguousarray(points, dtype=POINT_DTYPE).tobytes()


def write_scan(path: PathLike, points: np.ndarray):
    atomic_write_bytes(path, encode_points(points))


def to_world(scan: Scan) -> np.ndarray:
    """Sensor-frame xyz transformed by the scan pose"""
    return scan.pose.apply(scan.xyz)


# ---------------------------------------------------------------- poses

def load_poses(path: PathLike) -> Dict[str, Pose]:
    poses: Dict[str, Pose] = {}
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            fields = line.split()
            if not fields or fields[0].startswith("#"):
                continue
            if len(fields) != 13:
                raise PoseError(f"expected scan_id and 12 floats, got {len(fields)} fields", line=line_no)
            scan_id = fields[0]
            if scan_id in poses:
                raise PoseError(f"duplicate scan_id '{scan_id}'", line=line_no)
            try:
                values = np.array([float(v) for v in fields[1:]])
            except ValueError as e:
                raise PoseError(f"malformed number ({e})", line=line_no) from None
            try:
                poses[scan_id] = Pose.from_matrix(values.reshape(3, 4))
            except PoseError as e:
                raise PoseError(str(e), line=line_no) from None
    return poses


def write_poses(path: PathLike, poses: Dict[str, Pose]):
    with atomic_open(path, "w") as f:
        for scan_id, pose in poses.items():
            values = " ".join(repr(float(v)) for v in pose.as_matrix().ravel())
            f.write(f"{scan_id} {values}\n")


# ---------------------------------------------------------------- labels

def _parse_box(data: Dict, line_no: int) -> Box:
    if not isinstance(data, dict):
        raise LabelParseError(line_no, message="box entry is not an object")
    for key in BOX_KEYS:
        if key not in data:
            raise LabelParseError(line_no, key=key)
    try:
        return Box(*(float(data[key]) for key in BOX_KEYS), score=data.get("score"))
    except (TypeError, ValueError) as e:
        raise LabelParseError(line_no, message=f"bad box value ({e})") from None
    except LabelValidationError as e:
        raise LabelValidationError(f"line {line_no}: {e}") from None


def parse_label_line(line: str, line_no: int) -> LabelSet:
    try:
        data = json.loads(line)
    except json.JSONDecodeError as e:
        raise LabelParseError(line_no, message=f"invalid JSON ({e.msg})") from None
    if not isinstance(data, dict):
        raise LabelParseError(line_no, message="label line is not an object")
    for key in ("frame", "kind", "boxes"):
        if key not in data:
            raise LabelParseError(line_no, key=key)
    if not isinstance(data["boxes"], list):
        raise LabelParseError(line_no, key="boxes", message="'boxes' is not a list")
    boxes = [_parse_box(b, line_no) for b in data["boxes"]]
    try:
        return LabelSet(frame_id=str(data["frame"]), boxes=boxes, kind=data["kind"])
    except LabelValidationError as e:
        raise LabelValidationError(f"line {line_no}: {e}") from None


def read_labels(path: PathLike) -> List[LabelSet]:
    label_sets = []
    with open(path, "r") as f:
        for line_no, line in enumerate(f, 1):
            if line.strip():
                label_sets.append(parse_label_line(line, line_no))
    return label_sets


def label_line(label_set: LabelSet) -> str:
    return json.dumps(
        {"frame": label_set.frame_id, "kind": label_set.kind, "boxes": [b.to_dict() for b in label_set.boxes]}
    )


def write_labels(path: PathLike, label_sets: Iterable[LabelSet]):
    with atomic_open(path, "w") as f:
        for label_set in label_sets:
            f.write(label_line(label_set) + "\n")


# ---------------------------------------------------------------- dataset directories

def load_dataset(root: PathLike) -> Dataset:
    """Load a data directory described by manifest.json (layout written by the simulator)"""
    root = Path(root)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"{root}: manifest.json not found")
    with open(manifest_path, "r") as f:
        manifest = json.load(f)

    poses = load_poses(root / manifest.get("poses", "poses.txt"))
    scan_dir = root / manifest.get("scan_dir", "velodyne")

    traversals = []
    for entry in manifest["traversals"]:
        traversal_id = entry["traversal_id"]
        scans = []
        for scan_id in entry["scans"]:
            if scan_id not in poses:
                raise DataError(f"scan {scan_id} has no pose in the pose file")
            scans.append(load_scan(scan_dir / f"{scan_id}.bin", poses[scan_id], scan_id, traversal_id))
        traversals.append(Traversal(traversal_id, scans))

    ground_truth: Dict[str, LabelSet] = {}
    truth_file = manifest.get("ground_truth")
    if truth_file and (root / truth_file).exists():
        ground_truth = {ls.frame_id: ls for ls in read_labels(root / truth_file)}

    n_scans = sum(len(t.scans) for t in traversals)
    logger.info(f"📂 Loaded {n_scans} scans in {len(traversals)} traversals from {root}")
    return Dataset(root=root, traversals=traversals, ground_truth=ground_truth, manifest=manifest)
