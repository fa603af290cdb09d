"""Instance extraction tests, including the brute-force clustering oracle."""

from __future__ import annotations

import numpy as np
import pytest

from semreg.errors import ValidationError
from semreg.geometry import PointCloud, random_transform
from semreg.instances import (
    Category,
    CategoryConfig,
    SemanticPointCloud,
    default_category_config,
    euclidean_cluster,
    extract_instances,
)


def _cluster_oracle(points: np.ndarray, radius: float, min_points: int) -> list[list[int]]:
    """O(n^2) union-find over all point pairs."""
    n = len(points)
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i in range(n):
        for j in range(i + 1, n):
            if np.linalg.norm(points[i] - points[j]) <= radius:
                ri, rj = find(i), find(j)
                if ri != rj:
                    parent[max(ri, rj)] = min(ri, rj)
    groups: dict[int, list[int]] = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    clusters = [sorted(v) for v in groups.values() if len(v) >= min_points]
    clusters.sort(key=lambda c: c[0])
    return clusters


# ---------------------------------------------------------------------------
# euclidean_cluster
# ---------------------------------------------------------------------------


def test_two_far_groups_make_two_clusters() -> None:
    rng = np.random.default_rng(0)
    a = rng.normal(scale=0.2, size=(20, 3))
    b = rng.normal(scale=0.2, size=(20, 3)) + np.array([100.0, 0, 0])
    clusters = euclidean_cluster(np.vstack([a, b]), radius=1.0, min_points=1)
    assert len(clusters) == 2
    np.testing.assert_array_equal(clusters[0], np.arange(20))
    np.testing.assert_array_equal(clusters[1], np.arange(20, 40))


def test_single_point_below_min_size_is_dropped() -> None:
    clusters = euclidean_cluster(np.zeros((1, 3)), radius=1.0, min_points=2)
    assert clusters == []


def test_empty_input_gives_empty_output() -> None:
    assert euclidean_cluster(np.zeros((0, 3)), radius=1.0) == []


def test_cluster_matches_brute_force_union_find() -> None:
    rng = np.random.default_rng(1)
    points = rng.uniform(0.0, 5.0, size=(300, 3))
    got = euclidean_cluster(points, radius=0.5, min_points=1)
    want = _cluster_oracle(points, radius=0.5, min_points=1)
    assert [list(c) for c in got] == want


def test_cluster_min_points_filter_matches_oracle() -> None:
    rng = np.random.default_rng(2)
    points = rng.uniform(0.0, 4.0, size=(200, 3))
    got = euclidean_cluster(points, radius=0.4, min_points=5)
    want = _cluster_oracle(points, radius=0.4, min_points=5)
    assert [list(c) for c in got] == want


def test_cluster_rejects_bad_radius() -> None:
    with pytest.raises(ValidationError):
        euclidean_cluster(np.zeros((3, 3)), radius=0.0)


# ---------------------------------------------------------------------------
# CategoryConfig
# ---------------------------------------------------------------------------


def test_default_config_has_twelve_categories() -> None:
    cfg = default_category_config()
    assert cfg.num_categories == 12
    assert sorted(c.index for c in cfg.categories) == list(range(12))
    # person (raw id 30) is deliberately not retained
    assert 30 not in cfg.raw_to_index


def test_config_rejects_index_gaps() -> None:
    cats = (
        Category("a", 0, 1.0, 1),
        Category("b", 2, 1.0, 1),
    )
    with pytest.raises(ValidationError):
        CategoryConfig(categories=cats, raw_to_index={})


def test_config_rejects_bad_radius() -> None:
    with pytest.raises(ValidationError):
        CategoryConfig(
            categories=(Category("a", 0, -1.0, 1),),
            raw_to_index={},
        )


# ---------------------------------------------------------------------------
# extract_instances
# ---------------------------------------------------------------------------


def _blob(rng: np.random.Generator, center: np.ndarray, n: int = 200) -> np.ndarray:
    return center + rng.uniform(-0.5, 0.5, size=(n, 3))


def test_single_blob_yields_one_instance() -> None:
    rng = np.random.default_rng(10)
    cfg = default_category_config()
    pts = _blob(rng, np.array([5.0, 0.0, 0.0]))
    spc = SemanticPointCloud(PointCloud(pts), np.full(len(pts), 10))  # car
    result = extract_instances(spc, cfg, k_shape_points=128)
    assert len(result) == 1
    inst = result.instances[0]
    assert inst.category_name == "car"
    assert inst.one_hot.sum() == 1.0
    assert inst.one_hot[inst.category_index] == 1.0
    assert inst.shape_points.shape == (128, 3)
    assert inst.point_count == 200
    np.testing.assert_allclose(inst.centroid, pts.mean(axis=0), atol=1e-9)


def test_duplicated_blob_yields_two_instances() -> None:
    rng = np.random.default_rng(11)
    cfg = default_category_config()
    a = _blob(rng, np.zeros(3))
    b = a + np.array([100.0, 0.0, 0.0])
    pts = np.vstack([a, b])
    spc = SemanticPointCloud(PointCloud(pts), np.full(len(pts), 10))
    result = extract_instances(spc, cfg)
    assert len(result) == 2
    np.testing.assert_allclose(result.instances[0].centroid, a.mean(axis=0), atol=1e-9)
    np.testing.assert_allclose(result.instances[1].centroid, b.mean(axis=0), atol=1e-9)


def test_unknown_labels_are_counted_not_fatal() -> None:
    rng = np.random.default_rng(12)
    cfg = default_category_config()
    pts = _blob(rng, np.zeros(3))
    labels = np.full(len(pts), 10)
    labels[:50] = 999  # unmapped id
    spc = SemanticPointCloud(PointCloud(pts), labels)
    result = extract_instances(spc, cfg)
    assert result.unknown_label_counts == {999: 50}
    assert len(result) == 1
    assert result.instances[0].point_count == 150


def test_small_cluster_respects_min_points() -> None:
    cfg = default_category_config()
    pts = np.random.default_rng(13).uniform(-0.3, 0.3, size=(10, 3))
    spc = SemanticPointCloud(PointCloud(pts), np.full(10, 10))
    assert len(extract_instances(spc, cfg)) == 0  # 10 < min_points 30


def test_small_cluster_pads_shape_points() -> None:
    cfg = CategoryConfig(
        categories=(Category("thing", 0, 1.0, 5),),
        raw_to_index={1: 0},
    )
    rng = np.random.default_rng(14)
    pts = rng.uniform(-0.3, 0.3, size=(8, 3))
    spc = SemanticPointCloud(PointCloud(pts), np.ones(8, dtype=int))
    inst = extract_instances(spc, cfg, k_shape_points=16).instances[0]
    assert inst.shape_points.shape == (16, 3)
    # padding repeats the fps seed point
    np.testing.assert_array_equal(inst.shape_points[8:], np.tile(inst.shape_points[0], (8, 1)))


def test_centroids_are_transform_equivariant() -> None:
    rng = np.random.default_rng(15)
    cfg = default_category_config()
    pts = np.vstack([_blob(rng, np.array([3.0, 1.0, 0.0])), _blob(rng, np.array([-6.0, 2.0, 0.5]))])
    labels = np.concatenate([np.full(200, 10), np.full(200, 50)])
    spc = SemanticPointCloud(PointCloud(pts), labels)
    before = extract_instances(spc, cfg)

    t = random_transform(rng, max_angle_deg=90.0, max_translation=5.0)
    moved = SemanticPointCloud(PointCloud(t.apply(pts)), labels)
    after = extract_instances(moved, cfg)
    assert len(before) == len(after)
    for a, b in zip(before.instances, after.instances):
        np.testing.assert_allclose(t.apply(a.centroid.reshape(1, 3))[0], b.centroid, atol=1e-9)


def test_labels_length_mismatch_rejected() -> None:
    with pytest.raises(ValidationError):
        SemanticPointCloud(PointCloud(np.zeros((3, 3))), np.zeros(2, dtype=int))
