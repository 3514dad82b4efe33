#!/usr/bin/env python3
"""
Test Ephemerality Scoring
PP score closed forms and invariances, aggregation windows, dense clouds and PPF sidecars
"""

import math

import numpy as np
import pytest

from mobile_labeler.config import AggregationWindow, EphemeralityConfig
from mobile_labeler.core.ephemerality import (
    DenseCloudCache,
    PPField,
    TraversalCloud,
    build_dense_cloud,
    compute_pp_fields,
    load_pp_fields,
    persistence_scores,
    pp_score,
    read_ppf,
    select_scans,
    write_pp_fields,
    write_ppf,
)
from mobile_labeler.errors import EmptySelectionError, FormatError, InsufficientTraversalsError
from mobile_labeler.ingest.lidar_io import Dataset, Pose, Traversal, to_world


def route_traversal(make_scan, xs, traversal_id="t0"):
    scans = [
        make_scan([[0.0, 0.0, 0.0]], f"{traversal_id}_{i:03d}", traversal_id, Pose(np.eye(3), [x, 0.0, 0.0]))
        for i, x in enumerate(xs)
    ]
    return Traversal(traversal_id, scans)


# ---------------------------------------------------------------- scores

def test_no_neighbors_scores_zero():
    assert persistence_scores([[0, 0, 0]])[0] == 0.0


def test_uniform_counts_score_one():
    assert persistence_scores([[5, 5]])[0] == pytest.approx(1.0, abs=1e-9)


def test_single_traversal_counts_score_zero():
    assert persistence_scores([[8, 0, 0, 0]])[0] == pytest.approx(0.0, abs=1e-9)


def test_three_traversal_closed_form():
    expected = 1.5 * math.log(2) / math.log(3)
    assert persistence_scores([[2, 1, 1]])[0] == pytest.approx(expected, abs=1e-9)


def test_score_is_log_base_independent(rng):
    counts = rng.integers(0, 20, (500, 5))
    np.testing.assert_allclose(persistence_scores(counts), persistence_scores(counts, base=2), atol=1e-12)


def test_score_is_permutation_and_scale_invariant(rng):
    counts = rng.integers(0, 20, (200, 4))
    tau = persistence_scores(counts)
    np.testing.assert_allclose(persistence_scores(counts[:, ::-1]), tau, atol=1e-12)
    np.testing.assert_allclose(persistence_scores(counts * 7), tau, atol=1e-12)
    assert np.all((tau >= 0) & (tau <= 1))


def test_single_traversal_is_undefined():
    with pytest.raises(InsufficientTraversalsError):
        persistence_scores([[3]])


def test_pp_score_from_dense_clouds(make_scan):
    background = np.array([[0.0, 0.0, 0.0], [0.05, 0.0, 0.0]])
    cloud_a = build_dense_cloud([make_scan(np.vstack([background, [[5.0, 0.0, 0.0]]]), "a", "ta")], 0.3)
    cloud_b = build_dense_cloud([make_scan(background, "b", "tb")], 0.3)
    query = make_scan([[0.0, 0.0, 0.0], [5.0, 0.0, 0.0], [20.0, 0.0, 0.0]], "q", "ta")

    field = pp_score(query, [cloud_a, cloud_b], r=0.3)

    np.testing.assert_allclose(field.tau, [1.0, 0.0, 0.0], atol=1e-12)
    assert field.traversal_count == 2


def test_pp_score_queries_in_world_frame(make_scan):
    cloud_a = build_dense_cloud([make_scan([[10.0, 0.0, 0.0]], "a", "ta")], 0.3)
    cloud_b = build_dense_cloud([make_scan([[10.0, 0.0, 0.0]], "b", "tb")], 0.3)
    query = make_scan([[0.0, 0.0, 0.0]], "q", "ta", pose=Pose(np.eye(3), [10.0, 0.0, 0.0]))
    assert pp_score(query, [cloud_a, cloud_b]).tau[0] == pytest.approx(1.0)


def test_pp_score_needs_two_clouds(make_scan):
    cloud = build_dense_cloud([make_scan([[0.0, 0.0, 0.0]])], 0.3)
    with pytest.raises(InsufficientTraversalsError):
        pp_score(make_scan([[0.0, 0.0, 0.0]]), [cloud])


# ---------------------------------------------------------------- aggregation window

def test_select_scans_greedy_spacing(make_scan):
    traversal = route_traversal(make_scan, np.arange(0.0, 11.0))
    selected = select_scans(traversal, np.zeros(3), AggregationWindow(spacing=2.0))
    assert [s.ego_position[0] for s in selected] == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]


def test_select_scans_outside_range_is_empty(make_scan):
    traversal = route_traversal(make_scan, np.arange(75.0, 90.0))
    assert select_scans(traversal, np.zeros(3), AggregationWindow()) == []


def test_select_scans_keeps_both_passes(make_scan):
    xs = list(np.arange(0.0, 11.0)) + list(np.arange(10.0, -1.0, -1.0))
    traversal = route_traversal(make_scan, xs)
    selected = select_scans(traversal, np.zeros(3), AggregationWindow(spacing=2.0))
    positions = [s.ego_position[0] for s in selected]
    assert positions == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 8.0, 6.0, 4.0, 2.0, 0.0]


def test_forward_only_window(make_scan):
    traversal = route_traversal(make_scan, np.arange(-10.0, 11.0, 2.0))
    window = AggregationWindow(spacing=1.0, forward_only=True)
    selected = select_scans(traversal, np.zeros(3), window, heading=np.array([1.0, 0.0, 0.0]))
    assert [s.ego_position[0] for s in selected] == [0.0, 2.0, 4.0, 6.0, 8.0, 10.0]
    with pytest.raises(ValueError):
        select_scans(traversal, np.zeros(3), window)


# ---------------------------------------------------------------- dense clouds

def test_dense_cloud_of_identity_scan_is_raw_points(make_scan, rng):
    scan = make_scan(rng.uniform(-5, 5, (100, 3)))
    cloud = build_dense_cloud([scan], 0.3)
    np.testing.assert_array_equal(cloud.points, scan.xyz)
    assert cloud.grid.cell_size == 0.3


def test_dense_cloud_concatenates_and_keeps_duplicates(make_scan, rng):
    xyz = rng.uniform(-5, 5, (100, 3))
    first = make_scan(xyz, "s0")
    second = make_scan(xyz, "s1", pose=Pose.from_yaw(0.5, (1.0, 0.0, 0.0)))
    cloud = build_dense_cloud([first, second], 0.3)
    assert len(cloud) == 200
    np.testing.assert_allclose(cloud.points[100:], to_world(second))


def test_empty_selection_is_an_error():
    with pytest.raises(EmptySelectionError):
        build_dense_cloud([], 0.3, "t7")


def test_traversal_cloud_selection_counts_like_a_dense_cloud(make_scan, rng):
    scans = [
        make_scan(rng.uniform(-3, 3, (300, 3)), f"s{i}", "t0", pose=Pose.from_yaw(0.3 * i, (0.5 * i, 0.0, 0.0)))
        for i in range(6)
    ]
    shared = TraversalCloud(Traversal("t0", scans), 0.3)
    selected = [scans[1], scans[2], scans[4]]
    queries = rng.uniform(-3, 5, (400, 3))

    view = shared.select(selected)
    dense = build_dense_cloud(selected, 0.3)

    assert len(view) == len(dense) == 900
    np.testing.assert_array_equal(view.count_within_batch(queries, 0.3), dense.count_within_batch(queries, 0.3))


def test_traversal_cloud_empty_selection_is_an_error(make_scan):
    shared = TraversalCloud(Traversal("t3", [make_scan([[0.0, 0.0, 0.0]], "s0", "t3")]), 0.3)
    with pytest.raises(EmptySelectionError):
        shared.select([])


def test_cloud_cache_is_lru(make_scan):
    cache = DenseCloudCache(max_size=2)
    builds = []

    def builder(name):
        def _build():
            builds.append(name)
            return build_dense_cloud([make_scan([[0.0, 0.0, 0.0]], name)], 0.3)
        return _build

    cache.get_or_build("a", builder("a"))
    cache.get_or_build("b", builder("b"))
    cache.get_or_build("a", builder("a"))
    cache.get_or_build("c", builder("c"))  # evicts b
    cache.get_or_build("b", builder("b"))

    assert builds == ["a", "b", "c", "b"]
    assert cache.hits == 1
    assert cache.misses == 4


# ---------------------------------------------------------------- multi-traversal fields

def test_compute_pp_fields_on_two_traversals(tiny_dataset):
    fields = compute_pp_fields(tiny_dataset, EphemeralityConfig(), max_workers=1)
    assert set(fields) == {scan.scan_id for scan in tiny_dataset.scans}
    for scan in tiny_dataset.scans:
        assert len(fields[scan.scan_id]) == len(scan)
        assert fields[scan.scan_id].traversal_count == 2


def test_shared_grids_match_per_selection_clouds(tiny_dataset):
    shared = compute_pp_fields(tiny_dataset, EphemeralityConfig(), max_workers=1)
    cache = DenseCloudCache()
    rebuilt = compute_pp_fields(tiny_dataset, EphemeralityConfig(shared_grid_max_points=0), cache, max_workers=1)

    assert set(shared) == set(rebuilt)
    assert cache.misses > 0
    for scan_id, field in shared.items():
        np.testing.assert_array_equal(field.tau, rebuilt[scan_id].tau)


def test_pp_fields_do_not_depend_on_worker_count(tiny_dataset):
    serial = compute_pp_fields(tiny_dataset, EphemeralityConfig(), max_workers=1)
    threaded = compute_pp_fields(tiny_dataset, EphemeralityConfig(), max_workers=3)
    assert list(serial) == list(threaded)
    for scan_id, field in serial.items():
        np.testing.assert_array_equal(field.tau, threaded[scan_id].tau)


def test_compute_pp_fields_needs_two_traversals(tiny_dataset):
    single = Dataset(None, tiny_dataset.traversals[:1], {}, {})
    with pytest.raises(InsufficientTraversalsError):
        compute_pp_fields(single, EphemeralityConfig())


def test_without_own_traversal_capped_fields_are_skipped(tiny_dataset):
    cfg = EphemeralityConfig(include_own_traversal=False)
    # with two traversals, excluding the own one leaves a single cloud
    assert compute_pp_fields(tiny_dataset, cfg, max_workers=1) == {}


# ---------------------------------------------------------------- PPF sidecars

def test_ppf_sidecar_round_trip(tmp_path):
    field = PPField("s0", np.array([0.0, 0.25, 0.5, 1.0]), 3)
    write_ppf(tmp_path / "s0.ppf", field)
    loaded = read_ppf(tmp_path / "s0.ppf", traversal_count=3, expected_count=4)
    np.testing.assert_array_equal(loaded.tau, field.tau)
    assert loaded.scan_id == "s0"


def test_ppf_rejects_bad_magic(tmp_path):
    (tmp_path / "bad.ppf").write_bytes(b"XXXX\x00\x00\x00\x00")
    with pytest.raises(FormatError):
        read_ppf(tmp_path / "bad.ppf")


def test_ppf_rejects_short_payload(tmp_path):
    write_ppf(tmp_path / "s0.ppf", PPField("s0", np.zeros(4), 2))
    (tmp_path / "s0.ppf").write_bytes((tmp_path / "s0.ppf").read_bytes()[:-2])
    with pytest.raises(FormatError):
        read_ppf(tmp_path / "s0.ppf")


def test_ppf_rejects_point_count_mismatch(tmp_path):
    write_ppf(tmp_path / "s0.ppf", PPField("s0", np.zeros(4), 2))
    with pytest.raises(FormatError):
        read_ppf(tmp_path / "s0.ppf", expected_count=5)


def test_pp_field_directory_keeps_traversal_counts(tmp_path):
    fields = {"s0": PPField("s0", np.zeros(3), 2), "s1": PPField("s1", np.ones(2), 4)}
    write_pp_fields(tmp_path, fields, r=0.3)
    loaded = load_pp_fields(tmp_path)
    assert {k: v.traversal_count for k, v in loaded.items()} == {"s0": 2, "s1": 4}
    np.testing.assert_array_equal(loaded["s1"].tau, [1.0, 1.0])
