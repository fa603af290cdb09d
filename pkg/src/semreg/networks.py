"""Learned feature extractors for instance graphs.

Three feature kinds are computed per instance and fused by concatenation:

* spatial: a 3-layer EdgeConv GCN over normalized centroids
* semantic: the same GCN architecture over one-hot category vectors
* shape: a T-Net + shared MLP + max-pool encoder over the K shape points

Each kind is then refined by one round of self-attention within a scene and
one round of cross-attention against the other scene (single head, plain
dot-product scores, no residual paths).  All weights live in a flat
name -> Parameter dict whose keys form the checkpoint contract.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ValidationError
from .graph import InstanceGraph

__all__ = [
    "FeatureConfig",
    "InstanceFeatureSet",
    "MatchingModel",
    "gcn_forward",
    "shape_encode",
    "self_attention",
    "cross_attention",
    "extract_features",
]

log = logging.getLogger(__name__)

FEATURE_KINDS = ("o", "s", "h")  # spatial, semantic, shape
ATTENTION_STAGES = ("self", "cross")


@dataclass(frozen=True)
class FeatureConfig:
    """Architecture, input-normalization, and initialization settings.

    ``spatial_extent`` divides per-scene-centered centroid coordinates so the
    spatial branch sees inputs of comparable magnitude regardless of scene
    size; ``spatial_input_scale`` and ``semantic_input_scale`` rescale the
    normalized coordinates and one-hots.

    The init fields keep a fresh model out of a known failure basin.  Every
    graph-convolution layer sums edge features over all neighbors, so unit
    weight init grows feature norms by roughly the neighbor count per layer;
    the affinity weights' gradient scales with the product of those norms and
    then monopolizes the clipped update, freezing the rest of the network.
    ``gcn_init_gain`` shrinks the layer weights enough that features come out
    near unit scale.  ``attention_qk_gain`` sets the magnitude of the tied
    query/key projections (see MatchingModel): tying makes attention logits
    a Gram matrix, peaked on each instance itself, so attention starts as a
    soft identity instead of averaging all instances together — untied random
    projections start near-uniform, which erases instance identity and can
    freeze training at a loss plateau with an exactly-zero gradient.
    ``affinity_init_scale`` puts a scaled identity on the semantic block of
    the affinity weights (a tenth of it on spatial and shape blocks), making
    the initial affinity an inner product of features that are already
    similar for truly corresponding instances.  ``dustbin_init`` starts the
    unmatched score between typical true-pair and junk affinities.
    """

    num_categories: int = 12
    k_shape_points: int = 128
    gcn_dims: tuple[int, int, int] = (64, 64, 128)
    tnet_hidden: tuple[int, int] = (32, 32)
    shape_mlp_dims: tuple[int, int, int] = (64, 128, 128)
    spatial_extent: float = 50.0
    spatial_input_scale: float = 1.0
    semantic_input_scale: float = 1.0
    gcn_init_gain: float = 0.25
    shape_scale_init: float = 0.15
    attention_qk_gain: float = 2.0
    affinity_init_scale: float = 5.0
    dustbin_init: float = 5.0

    def __post_init__(self) -> None:
        if self.gcn_dims[-1] != self.shape_mlp_dims[-1]:
            raise ValidationError(
                f"feature dims disagree: gcn {self.gcn_dims[-1]} vs "
                f"shape {self.shape_mlp_dims[-1]}"
            )
        if self.spatial_extent <= 0.0:
            raise ValidationError("spatial_extent must be > 0")
        if self.spatial_input_scale <= 0.0 or self.semantic_input_scale <= 0.0:
            raise ValidationError("input scales must be > 0")
        for name in ("gcn_init_gain", "shape_scale_init", "attention_qk_gain"):
            if getattr(self, name) <= 0.0:
                raise ValidationError(f"{name} must be > 0")
        if self.affinity_init_scale < 0.0:
            raise ValidationError("affinity_init_scale must be >= 0")

    @property
    def feature_dim(self) -> int:
        return self.gcn_dims[-1]

    @property
    def fused_dim(self) -> int:
        return 3 * self.feature_dim


@dataclass(frozen=True, slots=True)
class InstanceFeatureSet:
    """Per-instance features of one scene after cross-attention."""

    o_feat: Tensor  # (M, D) spatial
    s_feat: Tensor  # (M, D) semantic
    h_feat: Tensor  # (M, D) shape
    fused: Tensor  # (M, 3D) concatenation [o; s; h]


class MatchingModel:
    """Container for every learned tensor, keyed by checkpoint name."""

    def __init__(self, config: FeatureConfig | None = None, seed: int = 0):
        self.config = config if config is not None else FeatureConfig()
        self.params: dict[str, Parameter] = {}
        rng = np.random.default_rng(seed)
        cfg = self.config

        for prefix, in_dim in (
            ("gcn_spatial", 3),
            ("gcn_semantic", cfg.num_categories),
        ):
            dims = (in_dim,) + cfg.gcn_dims
            for layer in range(3):
                # EdgeConv transforms the concatenated pair [f_i ; f_i - f_j];
                # the gain counters norm growth from the summed aggregation
                self._add_linear(
                    rng, f"{prefix}.layer{layer}", 2 * dims[layer], dims[layer + 1],
                    gain=cfg.gcn_init_gain,
                )

        t0, t1 = cfg.tnet_hidden
        self._add_linear(rng, "shape.tnet.mlp0", 3, t0)
        self._add_linear(rng, "shape.tnet.mlp1", t0, t1)
        # zero weight + identity bias make the initial point transform exact identity
        self._add("shape.tnet.fc.weight", np.zeros((t1, 9)))
        self._add("shape.tnet.fc.bias", np.eye(3).reshape(9).copy())
        mlp_dims = (3,) + cfg.shape_mlp_dims
        for layer in range(3):
            self._add_linear(rng, f"shape.mlp{layer}", mlp_dims[layer], mlp_dims[layer + 1])
            scale = cfg.shape_scale_init if layer == 2 else 1.0
            self._add(f"shape.mlp{layer}.scale", np.full(mlp_dims[layer + 1], scale))
            self._add(f"shape.mlp{layer}.shift", np.zeros(mlp_dims[layer + 1]))

        d = cfg.feature_dim
        for kind in FEATURE_KINDS:
            for stage in ATTENTION_STAGES:
                # query and key share their init so the logit matrix starts as
                # a Gram matrix: attention peaks on each instance itself and
                # instance identity survives into the refined features
                qk = ad.uniform_init(rng, (d, d)) * cfg.attention_qk_gain
                self._add(f"attn.{kind}.{stage}.q.weight", qk)
                self._add(f"attn.{kind}.{stage}.q.bias", np.zeros(d))
                self._add(f"attn.{kind}.{stage}.k.weight", qk.copy())
                self._add(f"attn.{kind}.{stage}.k.bias", np.zeros(d))
                self._add_linear(rng, f"attn.{kind}.{stage}.v", d, d)

        # block-scaled identity: the affinity starts as an inner product that
        # leans on the rigid-invariant semantic features
        a = cfg.affinity_init_scale
        blocks = np.zeros((cfg.fused_dim, cfg.fused_dim))
        blocks[0:d, 0:d] = (a / 10.0) * np.eye(d)
        blocks[d:2 * d, d:2 * d] = a * np.eye(d)
        blocks[2 * d:, 2 * d:] = (a / 10.0) * np.eye(cfg.shape_mlp_dims[-1])
        self._add("affinity.W", blocks)
        self._add("dustbin.z", np.asarray(float(cfg.dustbin_init)))

    # -- parameter bookkeeping ------------------------------------------------

    def _add(self, name: str, data: NDArray[np.float64]) -> None:
        if name in self.params:
            raise ValidationError(f"duplicate parameter name {name!r}")
        self.params[name] = Parameter(name, data)

    def _add_linear(
        self, rng: np.random.Generator, prefix: str, din: int, dout: int, gain: float = 1.0
    ) -> None:
        # zero biases: a random bias offset feeds the summed neighbor
        # aggregation a constant term that swamps the input signal, and the
        # first optimizer steps then push whole relu layers dead
        self._add(f"{prefix}.weight", ad.uniform_init(rng, (din, dout)) * gain)
        self._add(f"{prefix}.bias", np.zeros(dout))

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, NDArray[np.float64]]:
        return {name: p.data.copy() for name, p in self.params.items()}

    def load_state_dict(self, state: dict[str, NDArray[np.float64]]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ValidationError(
                f"parameter names do not match model: missing {missing}, extra {extra}"
            )
        for name, value in state.items():
            p = self.params[name]
            value = np.asarray(value, dtype=np.float64)
            if value.shape != p.data.shape:
                raise ValidationError(
                    f"parameter {name!r}: shape {value.shape} != expected {p.data.shape}"
                )
            p.data = value.copy()
            p.momentum_buffer = np.zeros_like(p.data)

    def _linear(self, prefix: str, x: Tensor) -> Tensor:
        return ad.matmul(x, self.params[f"{prefix}.weight"]) + self.params[f"{prefix}.bias"]


# ---------------------------------------------------------------------------
# EdgeConv GCN
# ---------------------------------------------------------------------------


def gcn_forward(model: MatchingModel, prefix: str, node_features: object, graph: InstanceGraph) -> Tensor:
    """Three EdgeConv layers over the instance graph.

    Per layer and node i: out_i = sum over neighbors j of
    relu(linear([f_i ; f_i - f_j])).  A graph without edges (single-instance
    scene) falls back to aggregating over {i} itself, where f_i - f_j = 0.
    """
    feats = node_features if isinstance(node_features, Tensor) else Tensor(node_features)
    m = graph.node_count
    if feats.shape[0] != m:
        raise ValidationError(
            f"{prefix}: feature rows {feats.shape[0]} != node count {m}"
        )
    expected = model.params[f"{prefix}.layer0.weight"].shape[0] // 2
    if feats.shape[1] != expected:
        raise ValidationError(
            f"{prefix}: input dim {feats.shape[1]} != expected {expected}"
        )
    degree = graph.neighbors.shape[1]
    if degree == 0:
        log.debug("%s: single-instance scene, using self-only aggregation", prefix)
        for layer in range(3):
            pair = ad.concat([feats, feats - feats], axis=1)
            feats = ad.relu(model._linear(f"{prefix}.layer{layer}", pair))
        return feats

    flat_neighbors = graph.neighbors.reshape(-1)
    self_index = np.repeat(np.arange(m), degree)
    for layer in range(3):
        f_self = ad.gather(feats, self_index)  # (M*deg, d)
        f_nb = ad.gather(feats, flat_neighbors)
        pair = ad.concat([f_self, f_self - f_nb], axis=1)
        edge_out = ad.relu(model._linear(f"{prefix}.layer{layer}", pair))
        out_dim = edge_out.shape[1]
        feats = edge_out.reshape((m, degree, out_dim)).sum(axis=1)
    return feats


# ---------------------------------------------------------------------------
# Shape encoder
# ---------------------------------------------------------------------------


def _canonical_shape_points(points: NDArray[np.float64]) -> NDArray[np.float64]:
    """Sort each instance's points lexicographically, then center on the mean.

    Sorting before any arithmetic pins the floating-point reduction order of
    both the mean and every later sum, which makes the encoder exactly
    permutation-invariant rather than invariant only up to rounding.
    """
    out = np.empty_like(points)
    for i, pts in enumerate(points):
        order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0]))
        out[i] = pts[order]
    return out - out.mean(axis=1, keepdims=True)


def encode_shapes(model: MatchingModel, shape_points: NDArray[np.float64]) -> Tensor:
    """Encode (M, K, 3) shape points into (M, D) features.

    Pipeline per Eq.-style reading: learned 3x3 point transform from a small
    T-Net, three shared MLP layers (linear -> feature-normalize -> relu) with
    statistics over the K points of each instance, then max-pool over K.
    """
    cfg = model.config
    m, k, _ = shape_points.shape
    if k != cfg.k_shape_points:
        raise ValidationError(
            f"shape encoder expects K={cfg.k_shape_points} points, got {k}"
        )
    pts = Tensor(_canonical_shape_points(np.asarray(shape_points, dtype=np.float64)))

    flat = pts.reshape((m * k, 3))
    t = ad.relu(model._linear("shape.tnet.mlp0", flat))
    t = ad.relu(model._linear("shape.tnet.mlp1", t))
    pooled = t.reshape((m, k, t.shape[1])).max(axis=1)  # (M, t1)
    h_mat = model._linear("shape.tnet.fc", pooled).reshape((m, 1, 3, 3))

    # batched p~ = p @ H^T:  out[m,k,i] = sum_j p[m,k,j] * H[m,i,j]
    expanded = pts.reshape((m, k, 1, 3)) * h_mat
    transformed = expanded.sum(axis=3).reshape((m * k, 3))

    x = transformed
    for layer in range(3):
        x = model._linear(f"shape.mlp{layer}", x)
        dim = x.shape[1]
        x = ad.feature_normalize(
            x.reshape((m, k, dim)),
            model.params[f"shape.mlp{layer}.scale"],
            model.params[f"shape.mlp{layer}.shift"],
            axis=1,
        )
        x = ad.relu(x).reshape((m * k, dim))
    return x.reshape((m, k, x.shape[1])).max(axis=1)


def shape_encode(model: MatchingModel, points: NDArray[np.float64]) -> Tensor:
    """Encode one instance's (K, 3) point set into a feature vector."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] != 3:
        raise ValidationError(f"expected (K, 3) points, got {points.shape}")
    out = encode_shapes(model, points[None])
    return out.reshape(out.shape[1])


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------


def _attention(model: MatchingModel, prefix: str, queries_from: Tensor, keys_values_from: Tensor) -> Tensor:
    q = model._linear(f"{prefix}.q", queries_from)
    k = model._linear(f"{prefix}.k", keys_values_from)
    v = model._linear(f"{prefix}.v", keys_values_from)
    weights = ad.softmax(ad.matmul(q, k.T), axis=1)
    return ad.matmul(weights, v)


def self_attention(model: MatchingModel, kind: str, feats: Tensor) -> Tensor:
    """Attend every instance over all instances of the same scene (incl. itself)."""
    return _attention(model, f"attn.{kind}.self", feats, feats)


def cross_attention(model: MatchingModel, kind: str, feats_x: Tensor, feats_y: Tensor) -> Tensor:
    """Attend scene-X queries over scene-Y keys/values (shared weights both ways)."""
    return _attention(model, f"attn.{kind}.cross", feats_x, feats_y)


# ---------------------------------------------------------------------------
# Full feature pipeline
# ---------------------------------------------------------------------------


def _normalized_centroids(cfg: FeatureConfig, graph: InstanceGraph) -> NDArray[np.float64]:
    centered = graph.centroids - graph.centroids.mean(axis=0, keepdims=True)
    return centered * (cfg.spatial_input_scale / cfg.spatial_extent)


def extract_features(
    model: MatchingModel, graph_x: InstanceGraph, graph_y: InstanceGraph
) -> tuple[InstanceFeatureSet, InstanceFeatureSet]:
    """Compute fused per-instance features for a scene pair.

    Spatial and semantic GCN features plus shape-encoder features, each
    refined by self-attention within its scene and cross-attention against
    the other scene, then concatenated to the fused matching feature.
    """
    cfg = model.config
    raw: dict[str, dict[str, Tensor]] = {"x": {}, "y": {}}
    for side, graph in (("x", graph_x), ("y", graph_y)):
        if graph.one_hots.shape[1] != cfg.num_categories:
            raise ValidationError(
                f"scene {side}: {graph.one_hots.shape[1]} categories, "
                f"model expects {cfg.num_categories}"
            )
        raw[side]["o"] = gcn_forward(model, "gcn_spatial", _normalized_centroids(cfg, graph), graph)
        raw[side]["s"] = gcn_forward(
            model, "gcn_semantic", graph.one_hots * cfg.semantic_input_scale, graph
        )
        raw[side]["h"] = encode_shapes(model, graph.shape_points)

    refined: dict[str, dict[str, Tensor]] = {"x": {}, "y": {}}
    for kind in FEATURE_KINDS:
        self_x = self_attention(model, kind, raw["x"][kind])
        self_y = self_attention(model, kind, raw["y"][kind])
        refined["x"][kind] = cross_attention(model, kind, self_x, self_y)
        refined["y"][kind] = cross_attention(model, kind, self_y, self_x)

    def fuse(side: str) -> InstanceFeatureSet:
        fused = ad.concat([refined[side][k] for k in FEATURE_KINDS], axis=1)
        return InstanceFeatureSet(
            o_feat=refined[side]["o"],
            s_feat=refined[side]["s"],
            h_feat=refined[side]["h"],
            fused=fused,
        )

    return fuse("x"), fuse("y")
