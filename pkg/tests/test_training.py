"""Ground-truth labeling, loss, scene generator, and train-loop tests."""

import numpy as np
import pytest

from semreg.autodiff import Tensor, grad_check
from semreg.errors import TrainingDivergedError, ValidationError
from semreg.geometry import RigidTransform, rotation_xyz
from semreg.instances import default_category_config, extract_instances
from semreg.matching import SoftAssignment, augment_dustbins, sinkhorn
from semreg.networks import FeatureConfig, MatchingModel
from semreg.training import (
    SceneGenConfig,
    TrainConfig,
    label_gt_correspondences,
    make_training_pairs,
    matching_loss,
    generate_scene_pair,
    prepare_scene_pair,
    train,
)

from test_pipeline import make_instances

TINY_NET = FeatureConfig(
    num_categories=12,
    k_shape_points=16,
    gcn_dims=(8, 8, 16),
    tnet_hidden=(4, 4),
    shape_mlp_dims=(8, 16, 16),
)
GEN = SceneGenConfig(
    instance_count=(6, 9),
    points_per_instance=(40, 80),
    point_noise_sigma=0.02,
    centroid_jitter_sigma=0.2,
    dropout=0.2,
)


def soft_from(trimmed):
    trimmed = np.asarray(trimmed, dtype=np.float64)
    m, n = trimmed.shape
    augmented = np.full((m + 1, n + 1), 1e-3)
    augmented[:m, :n] = trimmed
    return SoftAssignment(
        augmented=Tensor(augmented),
        trimmed=Tensor(trimmed),
        iterations=1,
        converged=True,
        residual=0.0,
    )


def labeling_oracle(inst_x, inst_y, gt, beta):
    """Literal O(M*N) mutual-nearest scan with a category gate."""
    moved = gt.apply(np.stack([i.centroid for i in inst_x]))
    cy = np.stack([i.centroid for i in inst_y])
    pairs = []
    for i, inst in enumerate(inst_x):
        dists = [
            np.linalg.norm(moved[i] - cy[j]) if inst_y[j].category_index == inst.category_index else np.inf
            for j in range(len(inst_y))
        ]
        j = int(np.argmin(dists))
        if not np.isfinite(dists[j]) or dists[j] >= beta:
            continue
        back = [
            np.linalg.norm(moved[a] - cy[j]) if inst_x[a].category_index == inst_y[j].category_index else np.inf
            for a in range(len(inst_x))
        ]
        if int(np.argmin(back)) == i:
            pairs.append((i, j))
    return sorted(pairs)


# ---------------------------------------------------------------------------
# label_gt_correspondences
# ---------------------------------------------------------------------------


def test_labeling_exact_copy_is_identity_pairing():
    gt = RigidTransform(rotation_xyz(0.1, -0.2, 0.9), np.array([4.0, 1.0, -0.5]))
    cx = np.array([[0.0, 0.0, 0.0], [8.0, 0.0, 0.0], [0.0, 9.0, 0.0], [5.0, 5.0, 1.0]])
    cats = [0, 1, 2, 0]
    inst_x = make_instances(cx, cats)
    inst_y = make_instances(gt.apply(cx), cats)
    pairs, ux, uy = label_gt_correspondences(inst_x, inst_y, gt)
    np.testing.assert_array_equal(pairs, [[0, 0], [1, 1], [2, 2], [3, 3]])
    assert len(ux) == 0 and len(uy) == 0


def test_labeling_dropped_instance_is_unmatched():
    gt = RigidTransform.identity()
    cx = np.array([[0.0, 0.0, 0.0], [8.0, 0.0, 0.0], [0.0, 9.0, 0.0]])
    inst_x = make_instances(cx, [0, 1, 2])
    inst_y = make_instances(cx[[0, 2]], [0, 2])  # instance 1 dropped
    pairs, ux, uy = label_gt_correspondences(inst_x, inst_y, gt)
    np.testing.assert_array_equal(pairs, [[0, 0], [2, 1]])
    np.testing.assert_array_equal(ux, [1])
    assert len(uy) == 0


def test_labeling_matches_brute_force_oracle():
    rng = np.random.default_rng(0)
    for trial in range(20):
        gt = RigidTransform(
            rotation_xyz(0.0, 0.0, rng.uniform(0, 2 * np.pi)), rng.normal(size=3) * 3
        )
        m, n = rng.integers(3, 12), rng.integers(3, 12)
        cx = rng.uniform(-15, 15, (m, 3))
        cats_x = rng.integers(0, 3, m)
        # y: jittered transforms of a random subset plus fresh clutter
        take = rng.permutation(m)[: rng.integers(1, m + 1)]
        cy = gt.apply(cx[take]) + rng.normal(scale=0.2, size=(len(take), 3))
        cats_y = cats_x[take]
        extra = rng.integers(0, 4)
        cy = np.vstack([cy, rng.uniform(-15, 15, (extra, 3))])
        cats_y = np.concatenate([cats_y, rng.integers(0, 3, extra)])
        order = rng.permutation(len(cy))
        inst_x = make_instances(cx, cats_x)
        inst_y = make_instances(cy[order], cats_y[order])
        pairs, _, _ = label_gt_correspondences(inst_x, inst_y, gt, 1.0)
        assert sorted(map(tuple, pairs.tolist())) == labeling_oracle(inst_x, inst_y, gt, 1.0)


def test_labeling_is_one_to_one():
    rng = np.random.default_rng(1)
    cx = rng.uniform(-5, 5, (10, 3))
    cy = rng.uniform(-5, 5, (12, 3))
    inst_x = make_instances(cx, rng.integers(0, 2, 10))
    inst_y = make_instances(cy, rng.integers(0, 2, 12))
    pairs, ux, uy = label_gt_correspondences(inst_x, inst_y, RigidTransform.identity(), 5.0)
    assert len(np.unique(pairs[:, 0])) == len(pairs)
    assert len(np.unique(pairs[:, 1])) == len(pairs)
    assert len(pairs) + len(ux) == 10
    assert len(pairs) + len(uy) == 12


def test_labeling_symmetry_under_scene_swap():
    rng = np.random.default_rng(2)
    gt = RigidTransform(rotation_xyz(0.0, 0.0, 1.2), np.array([2.0, -3.0, 0.1]))
    cx = rng.uniform(-10, 10, (7, 3))
    cy = gt.apply(cx) + rng.normal(scale=0.3, size=(7, 3))
    inst_x = make_instances(cx, rng.integers(0, 3, 7))
    inst_y = make_instances(cy, [i.category_index for i in inst_x])
    forward, _, _ = label_gt_correspondences(inst_x, inst_y, gt, 1.0)
    backward, _, _ = label_gt_correspondences(inst_y, inst_x, gt.inverse(), 1.0)
    assert sorted(map(tuple, forward.tolist())) == sorted(
        (j, i) for i, j in backward.tolist()
    )


def test_labeling_rejects_bad_beta():
    inst = make_instances(np.zeros((1, 3)))
    with pytest.raises(ValidationError):
        label_gt_correspondences(inst, inst, RigidTransform.identity(), 0.0)


# ---------------------------------------------------------------------------
# matching_loss
# ---------------------------------------------------------------------------


def test_loss_perfect_assignment_is_zero():
    trimmed = np.full((3, 3), 1e-9)
    np.fill_diagonal(trimmed, 1.0)
    loss = matching_loss(soft_from(trimmed), np.array([[0, 0], [1, 1], [2, 2]]))
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_loss_single_pair_inverse_e():
    trimmed = np.array([[np.exp(-1.0), 0.5], [0.5, 0.5]])
    loss = matching_loss(soft_from(trimmed), np.array([[0, 0]]))
    assert loss.item() == pytest.approx(1.0)


def test_loss_matches_direct_sum_oracle():
    rng = np.random.default_rng(3)
    trimmed = rng.uniform(0.05, 0.95, (6, 7))
    pairs = np.stack([rng.permutation(6)[:4], rng.permutation(7)[:4]], axis=1)
    want = -sum(np.log(trimmed[i, j]) for i, j in pairs)
    assert matching_loss(soft_from(trimmed), pairs).item() == pytest.approx(want)


def test_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(4, 5))
    pairs = np.array([[0, 1], [1, 4], [3, 0]])

    def f(x: Tensor) -> Tensor:
        return matching_loss(sinkhorn(augment_dustbins(x, Tensor(np.asarray(0.5))), 30), pairs)

    x = Tensor(a, requires_grad=True)
    assert grad_check(f, x, eps=1e-6) <= 1e-5


def test_loss_empty_ground_truth_warns_and_returns_zero(caplog):
    import logging

    with caplog.at_level(logging.WARNING, logger="semreg.training"):
        loss = matching_loss(soft_from(np.full((2, 2), 0.5)), np.zeros((0, 2)))
    assert loss.item() == 0.0
    assert any("no ground-truth" in rec.message for rec in caplog.records)


def test_loss_rejects_out_of_bounds_pairs():
    with pytest.raises(ValidationError):
        matching_loss(soft_from(np.full((2, 2), 0.5)), np.array([[0, 5]]))


def test_loss_dustbin_extension_matches_oracle():
    rng = np.random.default_rng(5)
    trimmed = rng.uniform(0.1, 0.9, (3, 4))
    soft = soft_from(trimmed)
    aug = soft.augmented.data
    pairs = np.array([[0, 0]])
    ux, uy = np.array([1, 2]), np.array([3])
    want = -np.log(trimmed[0, 0]) - np.log(aug[1, 4]) - np.log(aug[2, 4]) - np.log(aug[3, 3])
    got = matching_loss(soft, pairs, include_dustbins=True, unmatched_x=ux, unmatched_y=uy)
    assert got.item() == pytest.approx(want)


def test_loss_is_nonnegative_for_probability_entries():
    rng = np.random.default_rng(6)
    for _ in range(10):
        trimmed = rng.uniform(1e-6, 1.0, (5, 5))
        pairs = np.stack([np.arange(5), rng.permutation(5)], axis=1)
        assert matching_loss(soft_from(trimmed), pairs).item() >= 0.0


# ---------------------------------------------------------------------------
# generate_scene_pair
# ---------------------------------------------------------------------------


def test_generator_fixed_seed_is_bit_identical():
    a = generate_scene_pair(np.random.default_rng(7), GEN)
    b = generate_scene_pair(np.random.default_rng(7), GEN)
    np.testing.assert_array_equal(a[0].cloud.points, b[0].cloud.points)
    np.testing.assert_array_equal(a[1].cloud.points, b[1].cloud.points)
    np.testing.assert_array_equal(a[0].labels, b[0].labels)
    np.testing.assert_array_equal(a[1].labels, b[1].labels)
    np.testing.assert_array_equal(a[2].rotation, b[2].rotation)
    np.testing.assert_array_equal(a[2].translation, b[2].translation)


def test_generator_lossless_settings_recover_full_pairing():
    cfg = SceneGenConfig(
        instance_count=(8, 12),
        points_per_instance=(40, 80),
        point_noise_sigma=0.0,
        centroid_jitter_sigma=0.0,
        dropout=0.0,
    )
    cats = default_category_config()
    for seed in range(5):
        scene_x, scene_y, gt, planted = generate_scene_pair(np.random.default_rng(seed), cfg)
        inst_x = extract_instances(scene_x, cats, 16).instances
        inst_y = extract_instances(scene_y, cats, 16).instances
        assert len(inst_x) == len(inst_y) == len(planted)
        pairs, ux, uy = label_gt_correspondences(inst_x, inst_y, gt)
        assert len(pairs) == len(planted)
        assert len(ux) == 0 and len(uy) == 0


def test_generator_dropout_statistics():
    # an instance survives on both sides with probability (1 - 0.3)^2 = 0.49;
    # check the total over 200 trials against 3-sigma binomial bounds
    cfg = SceneGenConfig(
        instance_count=(8, 12),
        points_per_instance=(5, 8),
        dropout=0.3,
    )
    rng = np.random.default_rng(8)
    planted_total = 0
    surviving = 0
    for _ in range(200):
        _, _, _, planted = generate_scene_pair(rng, cfg)
        planted_total += len(planted)
        surviving += sum(1 for p in planted if p.kept_x and p.kept_y)
    expected = 0.49 * planted_total
    sigma = np.sqrt(planted_total * 0.49 * 0.51)
    assert abs(surviving - expected) <= 3.0 * sigma


def test_generator_transform_is_applied_to_kept_points():
    cfg = SceneGenConfig(
        instance_count=(4, 4),
        points_per_instance=(40, 60),
        point_noise_sigma=0.0,
        centroid_jitter_sigma=0.0,
        dropout=0.0,
    )
    scene_x, scene_y, gt, _ = generate_scene_pair(np.random.default_rng(9), cfg)
    moved = gt.apply(scene_x.cloud.points)
    # y is a per-instance permutation of the transformed x points
    assert np.allclose(
        np.sort(moved.round(9), axis=0), np.sort(scene_y.cloud.points.round(9), axis=0)
    )


def test_generator_rejects_overcrowded_layout():
    cramped = SceneGenConfig(
        instance_count=(60, 60),
        points_per_instance=(5, 5),
        area_extent=3.0,
        category_weights=(1.0,) + (0.0,) * 11,
    )
    with pytest.raises(ValidationError):
        generate_scene_pair(np.random.default_rng(10), cramped)


def test_gen_config_validation():
    with pytest.raises(ValidationError):
        SceneGenConfig(dropout=1.0)
    with pytest.raises(ValidationError):
        SceneGenConfig(instance_count=(5, 2))
    with pytest.raises(ValidationError):
        SceneGenConfig(points_per_instance=(0, 10))


def test_train_config_validation():
    with pytest.raises(ValidationError):
        TrainConfig(score_threshold=1.0)
    with pytest.raises(ValidationError):
        TrainConfig(learning_rate=-0.1)
    with pytest.raises(ValidationError):
        TrainConfig(batch_size=0)
    TrainConfig(learning_rate=0.0)  # frozen run is legal


# ---------------------------------------------------------------------------
# train loop
# ---------------------------------------------------------------------------


def small_corpus(n, base_seed=11):
    return make_training_pairs(
        n, GEN, k_shape_points=16, k_neighbors=4, base_seed=base_seed
    )


def test_train_zero_learning_rate_is_a_fixed_point():
    model = MatchingModel(TINY_NET, seed=0)
    before = {k: v.data.copy() for k, v in model.params.items()}
    cfg = TrainConfig(
        learning_rate=0.0, epochs=2, batch_size=2, k_shape_points=16, k_neighbors=4
    )
    history = train(model, small_corpus(3), cfg)
    assert len(history) == 2
    for key, old in before.items():
        np.testing.assert_array_equal(model.params[key].data, old)


def test_train_history_records_decayed_learning_rate():
    model = MatchingModel(TINY_NET, seed=0)
    cfg = TrainConfig(
        learning_rate=1e-3, lr_decay=0.5, epochs=3, batch_size=4,
        k_shape_points=16, k_neighbors=4,
    )
    history = train(model, small_corpus(2), cfg)
    assert [h.epoch for h in history] == [0, 1, 2]
    assert [h.learning_rate for h in history] == [1e-3, 5e-4, 2.5e-4]
    assert all(np.isfinite(h.mean_loss) and h.mean_loss > 0 for h in history)
    assert all(h.val_inlier_precision is None for h in history)


def test_train_reports_validation_metrics_when_given():
    model = MatchingModel(TINY_NET, seed=0)
    cfg = TrainConfig(
        learning_rate=1e-4, epochs=1, batch_size=4, k_shape_points=16, k_neighbors=4
    )
    history = train(model, small_corpus(2), cfg, val_pairs=small_corpus(2, base_seed=17))
    assert history[0].val_inlier_precision is not None
    assert 0.0 <= history[0].val_inlier_precision <= 1.0
    recall = history[0].val_inlier_recall
    assert recall is None or 0.0 <= recall <= 1.0


def test_train_divergence_guard_names_the_pair_seed():
    model = MatchingModel(TINY_NET, seed=0)
    model.params["affinity.W"].data[...] = np.nan  # poisoned weights
    pairs = small_corpus(2, base_seed=23)
    cfg = TrainConfig(epochs=1, batch_size=1, k_shape_points=16, k_neighbors=4)
    with pytest.raises(TrainingDivergedError) as err:
        train(model, pairs, cfg)
    assert "seed 23000000" in str(err.value) or "seed 23000001" in str(err.value)


def test_train_reduces_loss_on_small_corpus():
    model = MatchingModel(TINY_NET, seed=0)
    cfg = TrainConfig(
        learning_rate=3e-3, epochs=8, batch_size=2, k_shape_points=16,
        k_neighbors=4, seed=1,
    )
    history = train(model, small_corpus(4, base_seed=29), cfg)
    assert history[-1].mean_loss < history[0].mean_loss


def test_train_is_deterministic():
    cfg = TrainConfig(
        learning_rate=1e-3, epochs=2, batch_size=2, k_shape_points=16, k_neighbors=4
    )
    runs = []
    for _ in range(2):
        model = MatchingModel(TINY_NET, seed=0)
        history = train(model, small_corpus(3, base_seed=31), cfg)
        runs.append((history, {k: v.data.copy() for k, v in model.params.items()}))
    assert [h.mean_loss for h in runs[0][0]] == [h.mean_loss for h in runs[1][0]]
    for key in runs[0][1]:
        np.testing.assert_array_equal(runs[0][1][key], runs[1][1][key])


def test_prepare_scene_pair_carries_seed_and_ground_truth():
    scene_x, scene_y, gt, _ = generate_scene_pair(np.random.default_rng(12), GEN)
    pair = prepare_scene_pair(scene_x, scene_y, gt, k_shape_points=16, seed=99)
    assert pair.seed == 99
    assert pair.graph_x.node_count == len(pair.instances_x)
    assert len(pair.gt_pairs) + len(pair.unmatched_x) == len(pair.instances_x)
    assert len(pair.gt_pairs) + len(pair.unmatched_y) == len(pair.instances_y)
    # every labeled pair satisfies the category and distance rules
    for i, j in pair.gt_pairs:
        a, b = pair.instances_x[i], pair.instances_y[j]
        assert a.category_index == b.category_index
        moved = gt.apply(a.centroid[None, :])[0]
        assert np.linalg.norm(moved - b.centroid) < 1.0
