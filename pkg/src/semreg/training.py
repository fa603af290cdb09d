"""Ground-truth labeling, matching loss, synthetic scenes, and the train loop.

The synthetic generator plants category-labeled point blobs in a planar
scene, applies a rigid transform with noise, jitter, per-side instance
dropout, and order permutation, and returns both labeled clouds plus the
exact transform.  It stands in for full-scale driving data while exercising
the identical extraction/matching path.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import autodiff as ad
from .autodiff import Tensor, backward, clip_gradients, momentum_step, zero_grads
from .errors import TrainingDivergedError, ValidationError
from .geometry import PointCloud, RigidTransform, rotation_xyz
from .graph import InstanceGraph, build_graph
from .instances import (
    CategoryConfig,
    SemanticInstance,
    SemanticPointCloud,
    default_category_config,
    extract_instances,
)
from .matching import MatchConfig, SoftAssignment, hard_assign, soft_assign_graphs
from .networks import MatchingModel

__all__ = [
    "ScenePair",
    "SceneGenConfig",
    "TrainConfig",
    "PlantedInstance",
    "EpochStats",
    "label_gt_correspondences",
    "matching_loss",
    "generate_scene_pair",
    "prepare_scene_pair",
    "make_training_pairs",
    "train",
]

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneGenConfig:
    """Synthetic scene-pair generator settings (distances in meters)."""

    instance_count: tuple[int, int] = (15, 35)
    points_per_instance: tuple[int, int] = (150, 400)
    point_noise_sigma: float = 0.02
    centroid_jitter_sigma: float = 0.2
    dropout: float = 0.2  # independent per instance, per side
    rotation_deg: float = 360.0  # about z, full circle by default
    tilt_deg: float = 0.0  # small additional x/y tilt
    translation_max: float = 10.0
    area_extent: float = 40.0  # instances placed in [-extent, extent]^2 x-y
    z_extent: float = 1.0
    category_weights: tuple[float, ...] | None = None  # None = uniform

    def __post_init__(self) -> None:
        if not 0.0 <= self.dropout < 1.0:
            raise ValidationError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.instance_count[0] < 1 or self.instance_count[0] > self.instance_count[1]:
            raise ValidationError(f"bad instance_count range {self.instance_count}")
        if self.points_per_instance[0] < 1 or (
            self.points_per_instance[0] > self.points_per_instance[1]
        ):
            raise ValidationError(f"bad points_per_instance range {self.points_per_instance}")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.0001
    lr_decay: float = 0.98
    momentum: float = 0.9
    epochs: int = 30
    score_threshold: float = 0.7
    k_shape_points: int = 128
    k_neighbors: int = 10
    beta: float = 1.0  # inlier radius for ground-truth pairing, meters
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-6
    clip_grad_norm: float | None = 1.0  # None disables clipping
    include_dustbin_loss: bool = False
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.score_threshold < 1.0:
            raise ValidationError("score_threshold must be in (0, 1)")
        if self.learning_rate < 0.0:  # 0 is allowed: a frozen-weights run
            raise ValidationError("learning_rate must be >= 0")
        for name in ("batch_size", "lr_decay", "momentum",
                     "epochs", "k_shape_points", "k_neighbors", "beta"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            score_threshold=self.score_threshold,
            sinkhorn_max_iters=self.sinkhorn_max_iters,
            sinkhorn_tol=self.sinkhorn_tol,
        )


@dataclass(frozen=True, slots=True)
class PlantedInstance:
    """Ground-truth record of one planted object (coordinates in scene X)."""

    category_index: int
    raw_label: int
    center: NDArray[np.float64]
    half_extents: NDArray[np.float64]
    num_points: int
    kept_x: bool
    kept_y: bool


@dataclass(frozen=True, slots=True)
class ScenePair:
    """A ready-to-train pair: extracted instances, graphs, and ground truth."""

    instances_x: tuple[SemanticInstance, ...]
    instances_y: tuple[SemanticInstance, ...]
    graph_x: InstanceGraph
    graph_y: InstanceGraph
    gt_transform: RigidTransform
    gt_pairs: NDArray[np.int64]  # (P, 2) instance indices, one-to-one
    unmatched_x: NDArray[np.int64]
    unmatched_y: NDArray[np.int64]
    seed: int = -1  # generator seed, for reproducing a problem pair


@dataclass(frozen=True, slots=True)
class EpochStats:
    epoch: int
    mean_loss: float
    learning_rate: float
    val_inlier_precision: float | None = None
    val_inlier_recall: float | None = None


# ---------------------------------------------------------------------------
# Ground-truth correspondence labeling
# ---------------------------------------------------------------------------


def label_gt_correspondences(
    instances_x: tuple[SemanticInstance, ...] | list[SemanticInstance],
    instances_y: tuple[SemanticInstance, ...] | list[SemanticInstance],
    gt: RigidTransform,
    beta: float = 1.0,
) -> tuple[NDArray[np.int64], NDArray[np.int64], NDArray[np.int64]]:
    """Mutual-nearest same-category pairing of centroids under ``gt``.

    Returns (pairs, unmatched_x, unmatched_y); a pair (i, j) is accepted iff
    the instances share a category, each is the other's nearest same-category
    candidate once X is moved by ``gt``, and the distance is below ``beta``.
    """
    if beta <= 0.0:
        raise ValidationError(f"beta must be > 0, got {beta}")
    m, n = len(instances_x), len(instances_y)
    if m == 0 or n == 0:
        return (
            np.zeros((0, 2), dtype=np.int64),
            np.arange(m, dtype=np.int64),
            np.arange(n, dtype=np.int64),
        )
    moved = gt.apply(np.stack([inst.centroid for inst in instances_x]))
    centroids_y = np.stack([inst.centroid for inst in instances_y])
    dist = np.linalg.norm(moved[:, None, :] - centroids_y[None, :, :], axis=2)
    cat_x = np.array([inst.category_index for inst in instances_x])
    cat_y = np.array([inst.category_index for inst in instances_y])
    dist = np.where(cat_x[:, None] == cat_y[None, :], dist, np.inf)

    pairs = []
    row_best = dist.argmin(axis=1)
    col_best = dist.argmin(axis=0)
    for i in range(m):
        j = row_best[i]
        if col_best[j] == i and dist[i, j] < beta:
            pairs.append((i, int(j)))
    pair_arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    matched_x = set(pair_arr[:, 0].tolist())
    matched_y = set(pair_arr[:, 1].tolist())
    return (
        pair_arr,
        np.asarray([i for i in range(m) if i not in matched_x], dtype=np.int64),
        np.asarray([j for j in range(n) if j not in matched_y], dtype=np.int64),
    )


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------


def matching_loss(
    soft: SoftAssignment,
    gt_pairs: NDArray[np.int64],
    include_dustbins: bool = False,
    unmatched_x: NDArray[np.int64] | None = None,
    unmatched_y: NDArray[np.int64] | None = None,
) -> Tensor:
    """Negative log-likelihood of the ground-truth pairs under the assignment.

    L = -sum over (i, j) of log P_ij on the trimmed matrix.  The optional
    dustbin extension adds -log of the dustbin cells for ground-truth
    unmatched instances (off by default).  When the assignment carries its
    log-probability view, the log cells are gathered directly, so a cell
    whose probability underflowed to 0 still yields a finite loss.
    """
    m, n = soft.trimmed.shape
    terms: list[Tensor] = []
    gt_pairs = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    if len(gt_pairs):
        if gt_pairs[:, 0].max() >= m or gt_pairs[:, 1].max() >= n:
            raise ValidationError("gt pair index outside the assignment matrix")
        idx = gt_pairs[:, 0] * n + gt_pairs[:, 1]
        if soft.log_trimmed is not None:
            terms.append(ad.gather(soft.log_trimmed.reshape((m * n,)), idx).sum())
        else:
            terms.append(ad.log(ad.gather(soft.trimmed.reshape((m * n,)), idx)).sum())
    if include_dustbins:
        cells = []
        if unmatched_x is not None and len(unmatched_x):
            cells.append(np.asarray(unmatched_x, dtype=np.int64) * (n + 1) + n)
        if unmatched_y is not None and len(unmatched_y):
            cells.append(m * (n + 1) + np.asarray(unmatched_y, dtype=np.int64))
        if cells:
            idx = np.concatenate(cells)
            size = (m + 1) * (n + 1)
            if soft.log_augmented is not None:
                terms.append(ad.gather(soft.log_augmented.reshape((size,)), idx).sum())
            else:
                terms.append(ad.log(ad.gather(soft.augmented.reshape((size,)), idx)).sum())
    if not terms:
        log.warning("matching_loss: no ground-truth pairs; loss is 0")
        return Tensor(0.0)
    total = terms[0]
    for extra in terms[1:]:
        total = total + extra
    return -total


# ---------------------------------------------------------------------------
# Synthetic scene-pair generation
# ---------------------------------------------------------------------------


def _half_extent_range(radius: float) -> tuple[float, float]:
    # blob size scales with the category's physical radius
    return 0.3 * radius, 0.8 * radius


def _place_center(
    rng: np.random.Generator,
    cfg: SceneGenConfig,
    taken: list[tuple[int, NDArray[np.float64], float]],
    category: int,
    reach: float,
) -> NDArray[np.float64]:
    """Rejection-sample a center far enough from same-category instances."""
    for _ in range(200):
        center = np.array(
            [
                rng.uniform(-cfg.area_extent, cfg.area_extent),
                rng.uniform(-cfg.area_extent, cfg.area_extent),
                rng.uniform(-cfg.z_extent, cfg.z_extent),
            ]
        )
        ok = True
        for other_cat, other_center, other_reach in taken:
            if other_cat != category:
                continue
            min_sep = reach + other_reach + 6.0 * cfg.centroid_jitter_sigma + 0.5
            if np.linalg.norm(center - other_center) < min_sep:
                ok = False
                break
        if ok:
            return center
    raise ValidationError(
        "could not place instances without same-category overlap; "
        "reduce instance count or enlarge area_extent"
    )


def generate_scene_pair(
    rng: np.random.Generator,
    cfg: SceneGenConfig,
    categories: CategoryConfig | None = None,
) -> tuple[SemanticPointCloud, SemanticPointCloud, RigidTransform, list[PlantedInstance]]:
    """Plant labeled instances, derive scene Y by a noisy rigid transform.

    Scene X holds the planted points.  Scene Y holds the transformed points
    with per-point Gaussian noise and a per-instance centroid jitter offset,
    instances dropped independently on both sides, written in a permuted
    instance order.  Same-category instances are kept separated by more than
    their combined cluster reach so extraction recovers the planted layout.
    """
    categories = categories if categories is not None else default_category_config()
    index_to_raw: dict[int, int] = {}
    for raw, idx in sorted(categories.raw_to_index.items()):
        index_to_raw.setdefault(idx, raw)
    if cfg.category_weights is not None:
        if len(cfg.category_weights) != categories.num_categories:
            raise ValidationError("category_weights length must match category count")
        weights = np.asarray(cfg.category_weights, dtype=np.float64)
        weights = weights / weights.sum()
    else:
        weights = None

    num = int(rng.integers(cfg.instance_count[0], cfg.instance_count[1] + 1))
    theta = rng.uniform(0.0, np.deg2rad(cfg.rotation_deg))
    tilt = np.deg2rad(cfg.tilt_deg)
    tilt_x = rng.uniform(-tilt, tilt) if tilt > 0.0 else 0.0
    tilt_y = rng.uniform(-tilt, tilt) if tilt > 0.0 else 0.0
    direction = rng.uniform(0.0, 2.0 * np.pi)
    radius = rng.uniform(0.0, max(cfg.translation_max - 0.5, 0.0))
    gt = RigidTransform(
        rotation_xyz(tilt_x, tilt_y, theta),
        np.array(
            [radius * np.cos(direction), radius * np.sin(direction), rng.uniform(-0.5, 0.5)]
        ),
    )

    taken: list[tuple[int, NDArray[np.float64], float]] = []
    planted: list[PlantedInstance] = []
    points_x_parts: list[NDArray[np.float64]] = []
    points_y_parts: list[NDArray[np.float64]] = []
    labels_x_parts: list[NDArray[np.int64]] = []
    labels_y_parts: list[NDArray[np.int64]] = []

    kept_x_flags = rng.random(num) >= cfg.dropout
    kept_y_flags = rng.random(num) >= cfg.dropout
    if not kept_x_flags.any():
        kept_x_flags[0] = True
    if not kept_y_flags.any():
        kept_y_flags[0] = True

    for i in range(num):
        cat_index = int(rng.choice(categories.num_categories, p=weights))
        category = categories.by_index(cat_index)
        lo, hi = _half_extent_range(category.cluster_radius)
        half_extents = rng.uniform(lo, hi, size=3)
        reach = float(np.linalg.norm(half_extents)) + 0.5 * category.cluster_radius
        center = _place_center(rng, cfg, taken, cat_index, reach)
        taken.append((cat_index, center, reach))
        count = int(rng.integers(cfg.points_per_instance[0], cfg.points_per_instance[1] + 1))
        points = center + rng.uniform(-1.0, 1.0, size=(count, 3)) * half_extents

        jitter = rng.normal(scale=cfg.centroid_jitter_sigma, size=3)
        noise = rng.normal(scale=cfg.point_noise_sigma, size=(count, 3))
        points_y = gt.apply(points) + noise + jitter

        raw = index_to_raw[cat_index]
        planted.append(
            PlantedInstance(
                category_index=cat_index,
                raw_label=raw,
                center=center,
                half_extents=half_extents,
                num_points=count,
                kept_x=bool(kept_x_flags[i]),
                kept_y=bool(kept_y_flags[i]),
            )
        )
        if kept_x_flags[i]:
            points_x_parts.append(points)
            labels_x_parts.append(np.full(count, raw, dtype=np.int64))
        if kept_y_flags[i]:
            points_y_parts.append(points_y)
            labels_y_parts.append(np.full(count, raw, dtype=np.int64))

    order = rng.permutation(len(points_y_parts))
    scene_x = SemanticPointCloud(
        PointCloud(np.vstack(points_x_parts)), np.concatenate(labels_x_parts)
    )
    scene_y = SemanticPointCloud(
        PointCloud(np.vstack([points_y_parts[i] for i in order])),
        np.concatenate([labels_y_parts[i] for i in order]),
    )
    return scene_x, scene_y, gt, planted


def prepare_scene_pair(
    scene_x: SemanticPointCloud,
    scene_y: SemanticPointCloud,
    gt: RigidTransform,
    categories: CategoryConfig | None = None,
    k_shape_points: int = 128,
    k_neighbors: int = 10,
    beta: float = 1.0,
    seed: int = -1,
) -> ScenePair:
    """Extract instances and graphs from both scenes and label ground truth."""
    categories = categories if categories is not None else default_category_config()
    inst_x = extract_instances(scene_x, categories, k_shape_points).instances
    inst_y = extract_instances(scene_y, categories, k_shape_points).instances
    if len(inst_x) == 0 or len(inst_y) == 0:
        raise ValidationError("scene pair has a side with no instances")
    pairs, unmatched_x, unmatched_y = label_gt_correspondences(inst_x, inst_y, gt, beta)
    return ScenePair(
        instances_x=inst_x,
        instances_y=inst_y,
        graph_x=build_graph(list(inst_x), k_neighbors),
        graph_y=build_graph(list(inst_y), k_neighbors),
        gt_transform=gt,
        gt_pairs=pairs,
        unmatched_x=unmatched_x,
        unmatched_y=unmatched_y,
        seed=seed,
    )


def make_training_pairs(
    num_pairs: int,
    gen_cfg: SceneGenConfig | None = None,
    categories: CategoryConfig | None = None,
    k_shape_points: int = 128,
    k_neighbors: int = 10,
    beta: float = 1.0,
    base_seed: int = 0,
) -> list[ScenePair]:
    """Generate and prepare ``num_pairs`` scene pairs with per-pair seeds."""
    gen_cfg = gen_cfg if gen_cfg is not None else SceneGenConfig()
    out = []
    for i in range(num_pairs):
        seed = base_seed * 1_000_000 + i
        scene_x, scene_y, gt, _ = generate_scene_pair(
            np.random.default_rng(seed), gen_cfg, categories
        )
        out.append(
            prepare_scene_pair(
                scene_x, scene_y, gt, categories, k_shape_points, k_neighbors, beta, seed
            )
        )
    return out


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


def _pair_loss(model: MatchingModel, pair: ScenePair, cfg: TrainConfig) -> Tensor:
    soft = soft_assign_graphs(model, pair.graph_x, pair.graph_y, cfg.match_config())
    return matching_loss(
        soft,
        pair.gt_pairs,
        include_dustbins=cfg.include_dustbin_loss,
        unmatched_x=pair.unmatched_x,
        unmatched_y=pair.unmatched_y,
    )


def _validation_metrics(
    model: MatchingModel, val_pairs: list[ScenePair], cfg: TrainConfig
) -> tuple[float | None, float | None]:
    """Mean inlier precision / recall of hard assignments on held-out pairs."""
    from .pipeline import inlier_precision, inlier_recall  # late import, no cycle at module load

    precisions: list[float] = []
    recalls: list[float] = []
    with ad.no_grad():
        for pair in val_pairs:
            soft = soft_assign_graphs(model, pair.graph_x, pair.graph_y, cfg.match_config())
            corr = hard_assign(soft, cfg.score_threshold)
            precisions.append(
                inlier_precision(
                    corr.pairs, pair.instances_x, pair.instances_y, pair.gt_transform, cfg.beta
                )
            )
            recall = inlier_recall(
                corr.pairs, pair.gt_pairs, pair.instances_x, pair.instances_y,
                pair.gt_transform, cfg.beta,
            )
            if recall is not None:
                recalls.append(recall)
    precision = float(np.mean(precisions)) if precisions else None
    recall = float(np.mean(recalls)) if recalls else None
    return precision, recall


def train(
    model: MatchingModel,
    pairs: list[ScenePair],
    cfg: TrainConfig | None = None,
    val_pairs: list[ScenePair] | None = None,
) -> list[EpochStats]:
    """Mini-batch SGD with momentum over prepared scene pairs.

    The batch gradient is the mean of per-pair losses; the learning rate is
    multiplied by ``lr_decay`` after each epoch.  A non-finite pair loss aborts
    with the offending pair's generator seed in the message.
    """
    cfg = cfg if cfg is not None else TrainConfig()
    if not pairs:
        raise ValidationError("train needs at least one scene pair")
    params = model.parameters()
    rng = np.random.default_rng(cfg.seed)
    lr = cfg.learning_rate
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(pairs))
        epoch_losses: list[float] = []
        for start in range(0, len(order), cfg.batch_size):
            chunk = order[start : start + cfg.batch_size]
            zero_grads(params)
            batch_total: Tensor | None = None
            for idx in chunk:
                pair_loss = _pair_loss(model, pairs[idx], cfg)
                value = pair_loss.item()
                if not np.isfinite(value):
                    raise TrainingDivergedError(
                        f"non-finite loss {value} on pair seed {pairs[idx].seed} "
                        f"(epoch {epoch})"
                    )
                epoch_losses.append(value)
                batch_total = pair_loss if batch_total is None else batch_total + pair_loss
            batch_mean = batch_total * (1.0 / len(chunk))
            backward(batch_mean)
            if cfg.clip_grad_norm is not None:
                clip_gradients(params, cfg.clip_grad_norm)
            momentum_step(params, lr, cfg.momentum)
        precision, recall = (
            _validation_metrics(model, val_pairs, cfg) if val_pairs else (None, None)
        )
        history.append(
            EpochStats(
                epoch=epoch,
                mean_loss=float(np.mean(epoch_losses)),
                learning_rate=lr,
                val_inlier_precision=precision,
                val_inlier_recall=recall,
            )
        )
        lr *= cfg.lr_decay
    return history
