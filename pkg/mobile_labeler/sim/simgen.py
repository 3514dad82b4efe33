#!/usr/bin/env python3
"""
Synthetic Multi-Traversal LiDAR World
Cuboid scenes over a (possibly tilted) ground plane, scanned by a spinning multi-beam sensor
along per-traversal routes. Mobile objects carry an explicit placement per traversal, so the
ground truth of every scan is known exactly.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from mobile_labeler.errors import DataError, UnknownPresetError
from mobile_labeler.ingest.lidar_io import (
    Box,
    LabelSet,
    Pose,
    Scan,
    Traversal,
    write_labels,
    write_poses,
    write_scan,
)
from mobile_labeler.utils.atomic_write import atomic_write_text
from mobile_labeler.utils.parallel_execution import run_parallel

logger = logging.getLogger(__name__)

NO_HIT = -2
GROUND_HIT = -1
INTENSITY = {"ground": 0.15, "static": 0.45, "mobile": 0.75}
PRESETS = ("separation", "parked", "dense")


# ---------------------------------------------------------------- world description

@dataclass(frozen=True)
class GroundSpec:
    """Plane through (0, 0, height), tilted about the y axis so it rises along +x"""

    height: float = 0.0
    tilt_deg: float = 0.0

    @property
    def normal(self) -> np.ndarray:
        t = math.radians(self.tilt_deg)
        return np.array([-math.sin(t), 0.0, math.cos(t)])

    def z_at(self, x: float, y: float = 0.0) -> float:
        return self.height + math.tan(math.radians(self.tilt_deg)) * x


@dataclass(frozen=True)
class Cuboid:
    cx: float
    cy: float
    cz: float
    l: float
    w: float
    h: float
    yaw: float = 0.0
    kind: str = "building"

    def to_box(self) -> Box:
        return Box(self.cx, self.cy, self.cz, self.l, self.w, self.h, self.yaw)

    @property
    def radius(self) -> float:
        return 0.5 * math.sqrt(self.l ** 2 + self.w ** 2 + self.h ** 2)


@dataclass(frozen=True)
class MobileObject:
    """placements[t] is the object's cuboid during traversal t, or None when absent"""

    object_id: str
    kind: str
    placements: Tuple[Optional[Cuboid], ...]

    def present_in(self, traversal_index: int) -> bool:
        return self.placements[traversal_index] is not None


@dataclass(frozen=True)
class Route:
    traversal_id: str
    waypoints: Tuple[Tuple[float, float], ...]
    speed: float = 5.0
    scan_period: float = 1.0

    def ego_states(self) -> List[Tuple[float, float, float]]:
        """(x, y, yaw) every speed * scan_period meters along the polyline, start included"""
        points = np.asarray(self.waypoints, dtype=np.float64)
        segments = np.diff(points, axis=0)
        lengths = np.linalg.norm(segments, axis=1)
        cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
        step = self.speed * self.scan_period

        states = []
        for s in np.arange(0.0, cumulative[-1] + 1e-9, step):
            k = min(int(np.searchsorted(cumulative, s, side="right")) - 1, len(segments) - 1)
            frac = (s - cumulative[k]) / lengths[k]
            x, y = points[k] + frac * segments[k]
            states.append((float(x), float(y), math.atan2(segments[k][1], segments[k][0])))
        return states


@dataclass(frozen=True)
class SensorSpec:
    beams: int = 40
    vertical_fov: Tuple[float, float] = (-25.0, 5.0)
    azimuth_resolution: float = 0.4
    horizontal_fov: float = 360.0
    max_range: float = 80.0
    range_noise: float = 0.02
    dropout: float = 0.0
    height: float = 1.7

    def directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, beam-major"""
        n_azimuth = int(round(self.horizontal_fov / self.azimuth_resolution))
        azimuth = np.radians(-self.horizontal_fov / 2 + self.azimuth_resolution * np.arange(n_azimuth))
        elevation = np.radians(np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.beams))
        el, az = np.meshgrid(elevation, azimuth, indexing="ij")
        return np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1).reshape(-1, 3)


@dataclass(frozen=True)
class WorldSpec:
    name: str
    seed: int
    ground: GroundSpec
    statics: Tuple[Cuboid, ...]
    mobiles: Tuple[MobileObject, ...]
    routes: Tuple[Route, ...]
    sensor: SensorSpec = SensorSpec()


@dataclass
class SimOutput:
    spec: WorldSpec
    traversals: List[Traversal]
    ground_truth: Dict[str, LabelSet]
    manifest: Dict = field(default_factory=dict)

    @property
    def scans(self) -> List[Scan]:
        return [scan for traversal in self.traversals for scan in traversal.scans]


# ---------------------------------------------------------------- ray casting

class Scene:
    """Everything one traversal's sensor can hit; owners[k] names cuboid k ('static' or a mobile id)"""

    def __init__(self, ground: GroundSpec, cuboids: Sequence[Cuboid], owners: Sequence[str]):
        self.ground = ground
        self.cuboids = list(cuboids)
        self.owners = list(owners)

    @classmethod
    def for_traversal(cls, spec: WorldSpec, traversal_index: int) -> "Scene":
        cuboids = list(spec.statics)
        owners = ["static"] * len(cuboids)
        for mobile in spec.mobiles:
            if mobile.present_in(traversal_index):
                cuboids.append(mobile.placements[traversal_index])
                owners.append(mobile.object_id)
        return cls(spec.ground, cuboids, owners)

    def cast(self, origin: np.ndarray, directions: np.ndarray, max_range: float = math.inf) -> Tuple[np.ndarray, np.ndarray]:
        """Nearest hit distance and hit id per ray (cuboid index, GROUND_HIT or NO_HIT)"""
        origin = np.asarray(origin, dtype=np.float64)
        best_t = np.full(len(directions), np.inf)
        best_id = np.full(len(directions), NO_HIT, dtype=np.int64)

        normal = self.ground.normal
        denom = directions @ normal
        with np.errstate(divide="ignore", invalid="ignore"):
            t_ground = (normal @ np.array([0.0, 0.0, self.ground.height]) - normal @ origin) / denom
        ground_hit = (denom < -1e-12) & (t_ground > 0)
        best_t[ground_hit] = t_ground[ground_hit]
        best_id[ground_hit] = GROUND_HIT

        for k, cuboid in enumerate(self.cuboids):
            center = np.array([cuboid.cx, cuboid.cy, cuboid.cz])
            if np.linalg.norm(center - origin) - cuboid.radius > max_range:
                continue
            t_hit = slab_intersection(origin, directions, cuboid)
            closer = t_hit < best_t
            best_t[closer] = t_hit[closer]
            best_id[closer] = k
        return best_t, best_id


def slab_intersection(origin: np.ndarray, directions: np.ndarray, cuboid: Cuboid) -> np.ndarray:
    """Entry distance of each ray into an oriented cuboid (inf when missed or starting inside)"""
    c, s = math.cos(cuboid.yaw), math.sin(cuboid.yaw)
    to_local = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])
    o = to_local @ (origin - np.array([cuboid.cx, cuboid.cy, cuboid.cz]))
    d = directions @ to_local.T
    half = np.array([cuboid.l, cuboid.w, cuboid.h]) / 2

    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    t_near = np.max(np.minimum(t1, t2), axis=1)
    t_far = np.min(np.maximum(t1, t2), axis=1)
    hit = (t_far >= t_near) & (t_near > 1e-9)
    return np.where(hit, t_near, np.inf)


def _scan_rng(seed: int, traversal_index: int, scan_index: int) -> np.random.Generator:
    key = np.array([seed, (traversal_index << 32) | scan_index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _ego_pose(spec: WorldSpec, x: float, y: float, yaw: float) -> Pose:
    return Pose.from_yaw(yaw, (x, y, spec.ground.z_at(x, y) + spec.sensor.height))


def simulate_scan(spec: WorldSpec, scene: Scene, traversal_index: int, scan_index: int, pose: Pose):
    """Points (sensor frame, with intensity), per-point hit ids, and per-owner hit counts for one scan"""
    sensor = spec.sensor
    local_dirs = sensor.directions()
    t, hit_id = scene.cast(pose.translation, local_dirs @ pose.rotation.T, sensor.max_range)

    rng = _scan_rng(spec.seed, traversal_index, scan_index)
    noise = rng.normal(0.0, sensor.range_noise, len(t)) if sensor.range_noise > 0 else np.zeros(len(t))
    dropped = rng.random(len(t)) < sensor.dropout

    ranges = t + noise
    keep = (hit_id != NO_HIT) & (t <= sensor.max_range) & ~dropped & (ranges > 0)
    xyz = ranges[keep, None] * local_dirs[keep]

    kinds = np.where(hit_id[keep] == GROUND_HIT, "ground", "static").astype(object)
    owners = np.array(scene.owners + [""], dtype=object)[hit_id[keep]]
    kinds[(hit_id[keep] >= 0) & (owners != "static")] = "mobile"
    intensity = np.array([INTENSITY[k] for k in kinds])

    hits_per_owner: Dict[str, int] = {}
    for k in hit_id[keep][hit_id[keep] >= 0]:
        owner = scene.owners[k]
        hits_per_owner[owner] = hits_per_owner.get(owner, 0) + 1
    return np.column_stack([xyz, intensity]), hit_id[keep], hits_per_owner


def simulate(spec: WorldSpec, max_workers: Optional[int] = None) -> SimOutput:
    if not spec.routes:
        raise DataError("world spec has no routes")
    for mobile in spec.mobiles:
        if len(mobile.placements) != len(spec.routes):
            raise DataError(f"mobile object {mobile.object_id} has {len(mobile.placements)} placements "
                            f"for {len(spec.routes)} traversals")

    scenes = [Scene.for_traversal(spec, i) for i in range(len(spec.routes))]
    jobs = [
        (ti, si, state)
        for ti, route in enumerate(spec.routes)
        for si, state in enumerate(route.ego_states())
    ]

    def run_job(job):
        ti, si, (x, y, yaw) = job
        pose = _ego_pose(spec, x, y, yaw)
        points, _, hits = simulate_scan(spec, scenes[ti], ti, si, pose)
        return pose, points, hits

    results = run_parallel(run_job, jobs, max_workers=max_workers, description="simulating scans")

    scans_by_traversal: Dict[int, List[Scan]] = {i: [] for i in range(len(spec.routes))}
    ground_truth: Dict[str, LabelSet] = {}
    visible: Dict[str, List[str]] = {}
    mobiles = {m.object_id: m for m in spec.mobiles}
    for (ti, si, _), (pose, points, hits) in zip(jobs, results):
        route = spec.routes[ti]
        scan_id = f"{route.traversal_id}_{si:03d}"
        scans_by_traversal[ti].append(Scan(scan_id, points, pose, route.traversal_id))

        world_to_sensor = pose.inverse()
        boxes = []
        seen = sorted(owner for owner in hits if owner != "static")
        for object_id in seen:
            cuboid = mobiles[object_id].placements[ti]
            center = world_to_sensor.apply(np.array([cuboid.cx, cuboid.cy, cuboid.cz]))
            boxes.append(Box(center[0], center[1], center[2], cuboid.l, cuboid.w, cuboid.h, cuboid.yaw - pose.yaw))
        ground_truth[scan_id] = LabelSet(scan_id, boxes, kind="ground_truth")
        visible[scan_id] = seen

    traversals = [Traversal(route.traversal_id, scans_by_traversal[i]) for i, route in enumerate(spec.routes)]
    manifest = {
        "preset": spec.name,
        "seed": spec.seed,
        "poses": "poses.txt",
        "scan_dir": "velodyne",
        "ground_truth": "labels/ground_truth.jsonl",
        "world": "world.json",
        "traversals": [{"traversal_id": t.traversal_id, "scans": [s.scan_id for s in t.scans]} for t in traversals],
        "visible_objects": visible,
    }
    n_points = sum(len(s) for t in traversals for s in t.scans)
    logger.info(f"✅ Simulated {len(jobs)} scans in {len(traversals)} traversals ({n_points} points)")
    return SimOutput(spec, traversals, ground_truth, manifest)


def write_sim_output(out: SimOutput, directory: Union[str, Path]):
    directory = Path(directory)
    poses = {}
    for scan in out.scans:
        write_scan(directory / out.manifest["scan_dir"] / f"{scan.scan_id}.bin", scan.points)
        poses[scan.scan_id] = scan.pose
    write_poses(directory / out.manifest["poses"], poses)
    write_labels(directory / out.manifest["ground_truth"], [out.ground_truth[s.scan_id] for s in out.scans])
    atomic_write_text(directory / "manifest.json", json.dumps(out.manifest, indent=2, sort_keys=True))
    atomic_write_text(directory / out.manifest["world"], json.dumps(asdict(out.spec), indent=2, sort_keys=True))
    logger.info(f"💾 Wrote {len(out.scans)} scans to {directory}")


# ---------------------------------------------------------------- benchmark presets

ROUTE_LENGTH = 60.0
LANE = 1.75
CURB = 5.5
SIDEWALK = 7.5
POLE_ROW = 10.0
FAR_ROAD_X = 500.0
N_TRAVERSALS = 4


def _on_ground(ground: GroundSpec, x, y, l, w, h, yaw=0.0, kind="building") -> Cuboid:
    return Cuboid(float(x), float(y), ground.z_at(x, y) + h / 2, float(l), float(w), float(h), float(yaw), kind)


def _street(rng, ground: GroundSpec, x_lo: float, x_hi: float, building_y: float = 14.0) -> List[Cuboid]:
    statics = []
    for side in (-1.0, 1.0):
        x = x_lo + rng.uniform(0.0, 3.0)
        while x < x_hi:
            length = rng.uniform(10.0, 14.0)
            depth = rng.uniform(8.0, 10.0)
            statics.append(_on_ground(ground, x + length / 2, side * (building_y + depth / 2), length, depth,
                                      rng.uniform(6.0, 14.0)))
            x += length + rng.uniform(2.0, 4.0)
        for x in np.arange(x_lo + 5.0, x_hi, 20.0):
            statics.append(_on_ground(ground, x, side * POLE_ROW, 0.3, 0.3, 5.0, kind="pole"))
    return statics


def _mobile_dims(rng, kind: str) -> Tuple[float, float, float]:
    if kind == "car":
        return rng.uniform(4.0, 4.8), rng.uniform(1.7, 2.0), rng.uniform(1.4, 1.7)
    return rng.uniform(1.7, 1.9), rng.uniform(0.6, 0.8), rng.uniform(1.6, 1.8)


def _main_routes(rng) -> List[Route]:
    routes = []
    for i in range(N_TRAVERSALS):
        lane = (-LANE if i % 2 == 0 else LANE) + rng.uniform(-0.3, 0.3)
        start = rng.uniform(0.0, 2.0)
        waypoints = ((start, lane), (start + ROUTE_LENGTH, lane))
        if i % 2:
            waypoints = waypoints[::-1]
        routes.append(Route(f"t{i}", waypoints))
    return routes


def _slots(rng, x_lo: float, x_hi: float, ys: Sequence[float]) -> List[Tuple[float, float]]:
    pairs = [(float(x), float(y)) for x in np.arange(x_lo, x_hi, 8.0) for y in ys]
    order = rng.permutation(len(pairs))
    return [pairs[i] for i in order]


def _single_pass_mobiles(rng, ground, routes, n_traversals: int, slots: List, per_traversal: int = 3):
    """Objects each present in exactly one main-road traversal, never in the ego's own lane"""
    mobiles = []
    for i, route in enumerate(routes):
        ego_lane = route.waypoints[0][1]
        placed = 0
        while placed < per_traversal and slots:
            x, y = slots.pop(0)
            if abs(y - ego_lane) < 1.5:
                slots.append((x, y))
                if all(abs(sy - ego_lane) < 1.5 for _, sy in slots):
                    break
                continue
            kind = "car" if rng.random() < 0.75 else "cyclist"
            l, w, h = _mobile_dims(rng, kind)
            placements = [None] * n_traversals
            placements[i] = _on_ground(ground, x, y, l, w, h, rng.uniform(-0.1, 0.1), kind)
            mobiles.append(MobileObject(f"m{len(mobiles):02d}", kind, tuple(placements)))
            placed += 1
    return mobiles


def make_benchmark(preset: str, seed: int) -> WorldSpec:
    """Deterministic synthetic world for one of the named presets"""
    if preset not in PRESETS:
        raise UnknownPresetError(f"unknown preset '{preset}', expected one of {', '.join(PRESETS)}")
    rng = np.random.default_rng([seed, PRESETS.index(preset)])
    ground = GroundSpec()

    building_y = 11.0 if preset == "dense" else 14.0
    statics = _street(rng, ground, -40.0, 110.0, building_y)
    routes = _main_routes(rng)
    n_traversals = N_TRAVERSALS + (1 if preset == "parked" else 0)

    slots = _slots(rng, -5.0, 86.0, (-CURB, CURB, -LANE, LANE))
    mobiles = _single_pass_mobiles(rng, ground, routes, n_traversals, slots)

    if preset in ("parked", "dense"):
        # static clutter shaped like cars or smaller street furniture
        kinds = ("kiosk", "kiosk", "kiosk", "kiosk") if preset == "parked" else ("kiosk", "dumpster", "bench", "kiosk",
                                                                                 "dumpster", "bench", "kiosk", "dumpster")
        dims = {"kiosk": (4.2, 1.9, 1.6), "dumpster": (2.0, 1.5, 1.3), "bench": (1.8, 0.5, 0.5)}
        xs = rng.permutation(np.arange(-2.0, 84.0, 10.0))[: len(kinds)]
        for k, (kind, x) in enumerate(zip(kinds, xs)):
            side = -1.0 if k % 2 == 0 else 1.0
            l, w, h = dims[kind]
            statics.append(_on_ground(ground, x + 3.0, side * SIDEWALK, l, w, h, kind=kind))

    if preset == "parked":
        curb_slots = [(x, y) for x, y in slots if abs(y) == CURB]
        for x, y in curb_slots[:2]:
            l, w, h = _mobile_dims(rng, "car")
            cuboid = _on_ground(ground, x, y, l, w, h, rng.uniform(-0.05, 0.05), "car")
            mobiles.append(MobileObject(f"p{len(mobiles):02d}", "car", (cuboid,) * n_traversals))

        # a single-pass drive on a separate street: never revisited, so no PP field and no seeds
        far_lane = -LANE + rng.uniform(-0.3, 0.3)
        routes.append(Route("t4", ((FAR_ROAD_X, far_lane), (FAR_ROAD_X + ROUTE_LENGTH, far_lane))))
        statics.extend(_street(rng, ground, FAR_ROAD_X - 40.0, FAR_ROAD_X + 110.0))
        far_slots = _slots(rng, FAR_ROAD_X - 5.0, FAR_ROAD_X + 66.0, (-CURB, CURB, LANE))
        for x, y in far_slots[:4]:
            l, w, h = _mobile_dims(rng, "car")
            placements = (None,) * N_TRAVERSALS + (_on_ground(ground, x, y, l, w, h, rng.uniform(-0.1, 0.1), "car"),)
            mobiles.append(MobileObject(f"f{len(mobiles):02d}", "car", placements))

    return WorldSpec(preset, seed, ground, tuple(statics), tuple(mobiles), tuple(routes))
