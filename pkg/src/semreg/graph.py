"""Instance adjacency graph: directed k-NN over instance centroids."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from .errors import ValidationError
from .geometry import F64, Points, knn
from .instances import SemanticInstance

__all__ = ["InstanceGraph", "build_graph", "format_edge_list"]


@dataclass(frozen=True, slots=True)
class InstanceGraph:
    """Directed nearest-neighbor graph over a scene's instances.

    ``neighbors[i]`` lists the min(k, M-1) nearest other instances of node i,
    sorted ascending by centroid distance with ties broken by smaller index.
    Centroids, one-hot vectors, and shape points are stacked into arrays for
    the feature networks.
    """

    instances: tuple[SemanticInstance, ...]
    neighbors: NDArray[np.int64]  # (M, min(k, M-1))
    centroids: Points  # (M, 3)
    one_hots: NDArray[F64]  # (M, C)
    shape_points: NDArray[F64] = field(repr=False)  # (M, K, 3)

    @property
    def node_count(self) -> int:
        return len(self.instances)


def build_graph(instances: list[SemanticInstance], k: int = 10) -> InstanceGraph:
    """Connect every instance to its k nearest peers by centroid distance.

    Edges are directed and not symmetrized; a single-instance scene yields an
    empty neighbor list (downstream feature layers fall back to self-only
    aggregation).
    """
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    if len(instances) == 0:
        raise ValidationError("build_graph requires at least one instance")
    centroids = np.stack([inst.centroid for inst in instances])
    m = len(instances)
    degree = min(k, m - 1)
    if degree == 0:
        neighbors = np.zeros((m, 0), dtype=np.int64)
    else:
        # query one extra so the self match can be dropped
        idx, _ = knn(centroids, centroids, degree + 1)
        rows = []
        for i in range(m):
            row = idx[i][idx[i] != i]
            rows.append(row[:degree])
        neighbors = np.stack(rows)
    return InstanceGraph(
        instances=tuple(instances),
        neighbors=neighbors,
        centroids=centroids,
        one_hots=np.stack([inst.one_hot for inst in instances]),
        shape_points=np.stack([inst.shape_points for inst in instances]),
    )


def format_edge_list(graph: InstanceGraph) -> str:
    """Plain-text directed edge list (one ``src dst distance`` row per edge)."""
    lines = []
    for i in range(graph.node_count):
        for j in graph.neighbors[i]:
            dist = float(np.linalg.norm(graph.centroids[i] - graph.centroids[j]))
            lines.append(f"{i} {int(j)} {dist:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")
