import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakpoint.cloudstore import PointCloud
from weakpoint.pipeline.scenes import generate_scene
from weakpoint.weaksup import (
    SamplingStats,
    SeedGrid,
    build_seed_grid,
    class_frequencies,
    random_subclouds,
    sample_subclouds,
    scene_weak_label,
    weak_label_of,
)


def _box_cloud(size, n=2000, seed=0):
    rng = np.random.default_rng(seed)
    pts = rng.random((n, 3)) * np.asarray(size)
    pts[0], pts[1] = 0.0, size  # pin the bounding box
    return PointCloud(pts, np.zeros((n, 3)))


def test_seed_grid_box_gives_eighteen():
    grid = build_seed_grid(_box_cloud((5.5, 5.1, 2.4)), 2.0)
    assert grid.counts == (3, 3, 2)
    assert grid.num_seeds == 18 == len(grid.seeds())


def test_seed_grid_small_box_single_center():
    grid = build_seed_grid(_box_cloud((1.0, 1.0, 1.0)), 2.0)
    np.testing.assert_allclose(grid.seeds(), [[0.5, 0.5, 0.5]])


def test_seed_grid_coverage_six_by_six_by_three():
    cloud = _box_cloud((6.0, 6.0, 3.0), seed=7)
    seeds = build_seed_grid(cloud, 2.0).seeds()
    d = np.linalg.norm(cloud.positions[:, None, :] - seeds[None, :, :], axis=2)
    assert np.all(d.min(axis=1) < 2.0)


@settings(max_examples=50, deadline=None)
@given(
    st.tuples(st.floats(0.1, 12), st.floats(0.1, 12), st.floats(0.1, 4)),
    st.floats(0.5, 3.0),
    st.integers(0, 2**31 - 1),
)
def test_seed_grid_coverage_property(size, radius, seed):
    cloud = _box_cloud(size, n=300, seed=seed)
    seeds = build_seed_grid(cloud, radius).seeds()
    d = np.linalg.norm(cloud.positions[:, None, :] - seeds[None, :, :], axis=2)
    assert np.all(d.min(axis=1) < radius)
    subs = sample_subclouds(cloud, build_seed_grid(cloud, radius), labeled=False)
    assert sum(len(s) for s in subs) >= len(cloud)


def test_single_point_single_subcloud():
    cloud = PointCloud(np.zeros((1, 3)), np.zeros((1, 3)), [0])
    subs = sample_subclouds(cloud, build_seed_grid(cloud, 1.0), num_classes=2)
    assert len(subs) == 1 and subs[0].member_indices.tolist() == [0]
    assert subs[0].weak_label.tolist() == [1, 0]


def test_boundary_point_excluded():
    cloud = PointCloud([[0, 0, 0], [1.0, 0, 0]], np.zeros((2, 3)), [0, 1])
    z = np.zeros(1)
    grid = SeedGrid((1, 1, 1), (z, z, z), np.zeros(3), np.zeros(3), 1.0)
    subs = sample_subclouds(cloud, grid, num_classes=2)
    assert subs[0].member_indices.tolist() == [0]


def test_empty_seeds_dropped_and_counted():
    cloud = PointCloud([[0, 0, 0], [10, 0, 0]], np.zeros((2, 3)))
    stats = SamplingStats()
    subs = sample_subclouds(cloud, build_seed_grid(cloud, 1.0), labeled=False, stats=stats)
    assert len(subs) == 2 and stats.seeds == 10 and stats.empty_dropped == 8 and stats.emitted == 2


def test_weak_label_cases():
    assert weak_label_of(np.array([0, 0, 3]), 4).tolist() == [1, 0, 0, 1]
    assert weak_label_of(np.array([-1, 5]), 6).tolist() == [0, 0, 0, 0, 0, 1]
    with pytest.raises(ValueError):
        weak_label_of(np.array([4]), 4)
    with pytest.raises(ValueError):
        scene_weak_label(PointCloud(np.zeros((1, 3)), np.zeros((1, 3)), [-1]), 3)


def test_scene_label_is_or_of_covering_subclouds():
    rng = np.random.default_rng(11)
    cloud = PointCloud(rng.random((800, 3)) * [7, 5, 3], np.zeros((800, 3)), rng.integers(-1, 6, 800))
    subs = sample_subclouds(cloud, build_seed_grid(cloud, 2.0), num_classes=6)
    combined = np.bitwise_or.reduce(np.stack([s.weak_label for s in subs]), axis=0)
    np.testing.assert_array_equal(combined, scene_weak_label(cloud, 6))


def test_class_frequencies():
    np.testing.assert_array_equal(class_frequencies([np.ones(3), np.ones(3)]), [1, 1, 1])
    np.testing.assert_allclose(class_frequencies([[1, 0], [1, 1], [0, 0], [1, 0]]), [0.75, 0.25])
    with pytest.raises(ValueError):
        class_frequencies([])


def test_floor_and_one_box_imbalance():
    recipe = {
        "density": 60.0,
        "noise": 0.0,
        "color_noise": 0.0,
        "primitives": [
            {"kind": "floor", "class_id": 0, "min": [0, 0], "max": [6, 6]},
            {"kind": "box", "class_id": 2, "center": [1.0, 1.0], "size": [1.0, 1.0, 4.5]},
        ],
    }
    cloud = generate_scene(recipe, 0)
    scene = scene_weak_label(cloud, 3)
    subs = sample_subclouds(cloud, build_seed_grid(cloud, 2.0), num_classes=3)
    freq = class_frequencies([s.weak_label for s in subs])
    assert scene[2] == 1 and freq[2] < 1.0
    assert any(s.weak_label[0] == 0 for s in subs), "a seed at height should miss the floor"


def test_random_subclouds_carry_scene_label():
    rng = np.random.default_rng(0)
    cloud = PointCloud(rng.random((500, 3)) * 5, np.zeros((500, 3)), rng.integers(0, 3, 500))
    label = scene_weak_label(cloud, 3)
    subs = random_subclouds(cloud, 1.0, 12, np.random.default_rng(1), label)
    assert len(subs) == 12
    for s in subs:
        assert len(s) > 0
        np.testing.assert_array_equal(s.weak_label, label)
        d = np.linalg.norm(cloud.positions[s.member_indices] - s.seed, axis=1)
        assert np.all(d < 1.0)
