"""
Shared fixtures: point-cloud builders and a tiny two-traversal synthetic world
"""

import math
from dataclasses import replace

import numpy as np
import pytest

from mobile_labeler.ingest.lidar_io import Dataset, Pose, Scan
from mobile_labeler.sim.simgen import (
    Cuboid,
    GroundSpec,
    MobileObject,
    Route,
    SensorSpec,
    WorldSpec,
    simulate,
    write_sim_output,
)
from mobile_labeler.utils.parallel_execution import set_default_workers

SENSOR_HEIGHT = 1.7
TINY_SENSOR = SensorSpec(beams=8, azimuth_resolution=4.0, range_noise=0.0)


@pytest.fixture(autouse=True)
def _reset_workers():
    # the CLI's --threads leaves a module-level default behind
    set_default_workers(None)
    yield
    set_default_workers(None)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture
def make_scan():
    def _make(xyz, scan_id="s0", traversal_id="t0", pose=None, intensity=0.5):
        xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
        points = np.hstack([xyz, np.full((len(xyz), 1), intensity)])
        return Scan(scan_id, points, pose or Pose.identity(), traversal_id)

    return _make


@pytest.fixture
def ground_grid():
    """Flat ground at z = -1.7 in the sensor frame, sampled on a regular grid"""
    def _grid(extent=20.0, spacing=0.5, z=-SENSOR_HEIGHT):
        axis = np.arange(-extent, extent + 1e-9, spacing)
        gx, gy = np.meshgrid(axis, axis, indexing="ij")
        return np.column_stack([gx.ravel(), gy.ravel(), np.full(gx.size, z)])

    return _grid


@pytest.fixture
def cuboid_surface():
    """Uniform samples on the side and top faces of an upright cuboid (no bottom face)"""
    def _sample(rng, center, dims, yaw=0.0, n=400):
        l, w, h = dims
        faces = [  # (area, fixed axis, fixed sign)
            (w * h, 0, 1.0), (w * h, 0, -1.0), (l * h, 1, 1.0), (l * h, 1, -1.0), (l * w, 2, 1.0),
        ]
        areas = np.array([f[0] for f in faces])
        choice = rng.choice(len(faces), size=n, p=areas / areas.sum())
        local = rng.uniform(-0.5, 0.5, (n, 3)) * [l, w, h]
        half = np.array([l, w, h]) / 2
        for k, (_, axis, sign) in enumerate(faces):
            local[choice == k, axis] = sign * half[axis]
        c, s = math.cos(yaw), math.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return local @ rotation.T + np.asarray(center, dtype=np.float64)

    return _sample


def make_tiny_world(range_noise: float = 0.0) -> WorldSpec:
    ground = GroundSpec()
    statics = (
        Cuboid(6.0, 9.0, 4.0, 10.0, 4.0, 8.0, 0.0, "building"),
        Cuboid(2.0, -7.0, 2.5, 0.3, 0.3, 5.0, 0.0, "pole"),
    )
    car = Cuboid(7.0, -4.0, 0.75, 4.4, 1.8, 1.5, 0.1, "car")
    mobiles = (MobileObject("m00", "car", (car, None)),)
    routes = (
        Route("t0", ((0.0, 0.0), (10.0, 0.0))),
        Route("t1", ((10.0, 0.5), (0.0, 0.5))),
    )
    return WorldSpec("tiny", 3, ground, statics, mobiles, routes, replace(TINY_SENSOR, range_noise=range_noise))


@pytest.fixture(scope="session")
def tiny_world_factory():
    return make_tiny_world


@pytest.fixture(scope="session")
def tiny_world():
    return make_tiny_world()


@pytest.fixture(scope="session")
def tiny_sim(tiny_world):
    return simulate(tiny_world, max_workers=1)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_sim):
    return Dataset(root=None, traversals=tiny_sim.traversals, ground_truth=tiny_sim.ground_truth,
                   manifest=tiny_sim.manifest)


@pytest.fixture(scope="session")
def tiny_data_dir(tiny_sim, tmp_path_factory):
    directory = tmp_path_factory.mktemp("tiny_data")
    write_sim_output(tiny_sim, directory)
    return directory
