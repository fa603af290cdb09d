"""Semantic instance extraction from labeled point clouds.

A labeled scan is reduced to a list of semantic instances: per-category
Euclidean clusters, each summarized by its centroid, a one-hot category
vector, and a fixed-size set of farthest-point-sampled shape points.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from scipy.spatial import cKDTree

from .errors import ValidationError
from .geometry import F64, Points, PointCloud, Vec3, as_points, fps

__all__ = [
    "SemanticPointCloud",
    "Category",
    "CategoryConfig",
    "SemanticInstance",
    "ExtractionResult",
    "default_category_config",
    "euclidean_cluster",
    "extract_instances",
]


@dataclass(frozen=True, slots=True)
class SemanticPointCloud:
    """A point cloud with one raw integer category label per point."""

    cloud: PointCloud
    labels: NDArray[np.int64]

    def __post_init__(self) -> None:
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if labels.ndim != 1 or len(labels) != len(self.cloud):
            raise ValidationError(
                f"labels shape {labels.shape} does not match {len(self.cloud)} points"
            )
        if len(labels) and labels.min() < 0:
            raise ValidationError("labels must be non-negative")
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return len(self.cloud)


@dataclass(frozen=True, slots=True)
class Category:
    name: str
    index: int  # position in the one-hot encoding
    cluster_radius: float  # Euclidean clustering connection radius, meters
    min_points: int  # clusters below this size are dropped


@dataclass(frozen=True)
class CategoryConfig:
    """Retained categories plus the raw-label-id mapping onto them.

    Several raw ids may map to the same category.  Category indices must
    form a bijection onto 0..C-1 so one-hot vectors are well defined.
    """

    categories: tuple[Category, ...]
    raw_to_index: dict[int, int] = field(repr=False)

    def __post_init__(self) -> None:
        indices = sorted(c.index for c in self.categories)
        if indices != list(range(len(self.categories))):
            raise ValidationError(
                f"category indices must cover 0..C-1 exactly once, got {indices}"
            )
        for cat in self.categories:
            if cat.cluster_radius <= 0.0:
                raise ValidationError(f"category {cat.name!r}: radius must be > 0")
            if cat.min_points < 1:
                raise ValidationError(f"category {cat.name!r}: min_points must be >= 1")
        for raw, idx in self.raw_to_index.items():
            if not 0 <= idx < len(self.categories):
                raise ValidationError(f"raw label {raw} maps to unknown index {idx}")

    @property
    def num_categories(self) -> int:
        return len(self.categories)

    def by_index(self, index: int) -> Category:
        for cat in self.categories:
            if cat.index == index:
                return cat
        raise ValidationError(f"no category with index {index}")


def default_category_config() -> CategoryConfig:
    """Twelve retained outdoor categories keyed by SemanticKITTI raw ids.

    Radii reflect physical object scale: 0.5 m for thin fixtures, 1.0 m for
    vehicles, 2.0 m for large structures.  Sparse/dynamic classes such as
    person are deliberately unmapped and therefore ignored.
    """
    table = [
        # (raw id, name, radius)
        (10, "car", 1.0),
        (11, "bicycle", 1.0),
        (15, "motorcycle", 1.0),
        (18, "truck", 1.0),
        (20, "other-vehicle", 1.0),
        (50, "building", 2.0),
        (51, "fence", 2.0),
        (52, "other-structure", 2.0),
        (70, "vegetation", 2.0),
        (71, "trunk", 0.5),
        (80, "pole", 0.5),
        (81, "traffic-sign", 0.5),
    ]
    categories = tuple(
        Category(name=name, index=i, cluster_radius=radius, min_points=30)
        for i, (_, name, radius) in enumerate(table)
    )
    raw_to_index = {raw: i for i, (raw, _, _) in enumerate(table)}
    return CategoryConfig(categories=categories, raw_to_index=raw_to_index)


@dataclass(frozen=True, slots=True)
class SemanticInstance:
    """One clustered object: location, category encoding, and sampled shape."""

    id: int
    category_index: int
    category_name: str
    centroid: Vec3
    one_hot: NDArray[F64]
    shape_points: Points  # exactly K rows, absolute coordinates
    point_count: int  # original cluster size
    point_indices: NDArray[np.int64] = field(repr=False)


@dataclass(frozen=True, slots=True)
class ExtractionResult:
    instances: tuple[SemanticInstance, ...]
    unknown_label_counts: dict[int, int]  # raw id -> number of points ignored

    def __len__(self) -> int:
        return len(self.instances)


# ---------------------------------------------------------------------------
# Clustering
# ---------------------------------------------------------------------------


def euclidean_cluster(
    points: Points, radius: float, min_points: int = 1
) -> list[NDArray[np.int64]]:
    """Connected components of the radius graph (edges where distance <= radius).

    Components smaller than ``min_points`` are discarded.  Clusters are
    ordered by their smallest member index; members are sorted ascending.
    """
    if radius <= 0.0:
        raise ValidationError(f"radius must be > 0, got {radius}")
    points = as_points(points)
    n = len(points)
    if n == 0:
        return []
    pairs = cKDTree(points).query_pairs(r=radius, output_type="ndarray")
    graph = coo_matrix(
        (np.ones(len(pairs), dtype=np.int8), (pairs[:, 0], pairs[:, 1])), shape=(n, n)
    )
    _, labels = connected_components(graph, directed=False)
    # np.unique scans in index order, so first-occurrence positions are each
    # component's smallest member index; sorting by them fixes cluster order
    component_ids, first_seen = np.unique(labels, return_index=True)
    clusters: list[NDArray[np.int64]] = []
    for comp in component_ids[np.argsort(first_seen, kind="stable")]:
        members = np.flatnonzero(labels == comp).astype(np.int64)
        if len(members) >= min_points:
            clusters.append(members)
    return clusters


def extract_instances(
    spc: SemanticPointCloud, cfg: CategoryConfig, k_shape_points: int = 128
) -> ExtractionResult:
    """Cluster each retained category and emit one instance per cluster.

    Raw labels absent from the config are skipped and tallied in the result's
    ``unknown_label_counts``.  Instance ids are assigned sequentially in
    (category_index, cluster order) so extraction is deterministic.
    """
    if k_shape_points < 1:
        raise ValidationError(f"k_shape_points must be >= 1, got {k_shape_points}")
    points = spc.cloud.points
    labels = spc.labels
    num_categories = cfg.num_categories

    mapped = np.full(len(labels), -1, dtype=np.int64)
    unknown: dict[int, int] = {}
    for raw in np.unique(labels):
        idx = cfg.raw_to_index.get(int(raw))
        if idx is None:
            unknown[int(raw)] = int((labels == raw).sum())
        else:
            mapped[labels == raw] = idx

    instances: list[SemanticInstance] = []
    for category in sorted(cfg.categories, key=lambda c: c.index):
        cat_point_idx = np.flatnonzero(mapped == category.index)
        if len(cat_point_idx) == 0:
            continue
        cat_points = points[cat_point_idx]
        for members in euclidean_cluster(
            cat_points, category.cluster_radius, category.min_points
        ):
            cluster_points = cat_points[members]
            one_hot = np.zeros(num_categories)
            one_hot[category.index] = 1.0
            shape_idx = fps(cluster_points, k_shape_points)
            instances.append(
                SemanticInstance(
                    id=len(instances),
                    category_index=category.index,
                    category_name=category.name,
                    centroid=cluster_points.mean(axis=0),
                    one_hot=one_hot,
                    shape_points=cluster_points[shape_idx],
                    point_count=len(members),
                    point_indices=cat_point_idx[members],
                )
            )
    return ExtractionResult(instances=tuple(instances), unknown_label_counts=unknown)
