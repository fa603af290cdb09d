"""Optimal matching layer: affinity, dustbins, Sinkhorn, hard assignment.

The soft assignment is produced by exponentiating the dustbin-augmented
affinity matrix and alternating row/column sum normalization; gradients flow
through every iteration performed.  Hard correspondences are the entries
that exceed the score threshold and are the argmax of both their row and
their column, which makes the output one-to-one by construction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ValidationError
from .graph import InstanceGraph
from .networks import MatchingModel, extract_features

__all__ = [
    "MatchConfig",
    "SoftAssignment",
    "CorrespondenceSet",
    "affinity",
    "augment_dustbins",
    "sinkhorn",
    "hard_assign",
    "hungarian_assign",
    "soft_assign_graphs",
    "format_correspondences",
]

def _logsumexp(t: Tensor, axis: int) -> Tensor:
    # max + log-sum-exp of the residual; the composed gradient is the exact
    # softmax, and the log's denominator is always >= 1 (the argmax term)
    shift = ad.tensor_max(t, axis=axis, keepdims=True)
    return shift + ad.log(ad.tensor_sum(ad.exp(t - shift), axis=axis, keepdims=True))


@dataclass(frozen=True, slots=True)
class MatchConfig:
    score_threshold: float = 0.7
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-6


@dataclass(frozen=True, slots=True)
class SoftAssignment:
    """Doubly-normalized augmented matrix plus its trimmed M x N view."""

    augmented: Tensor  # (M+1, N+1)
    trimmed: Tensor  # (M, N), same tape
    iterations: int
    converged: bool
    residual: float  # max |row/col sum - 1| at the final iterate
    # log-probability views of the same plan, when the producer has them;
    # losses should prefer these so extreme cells stay finite
    log_augmented: Tensor | None = None
    log_trimmed: Tensor | None = None

    @property
    def num_x(self) -> int:
        return self.trimmed.shape[0]

    @property
    def num_y(self) -> int:
        return self.trimmed.shape[1]


@dataclass(frozen=True, slots=True)
class CorrespondenceSet:
    """One-to-one correspondences (i, j) with their assignment scores."""

    pairs: NDArray[np.int64]  # (P, 2), sorted by i
    scores: NDArray[np.float64]  # (P,)
    unmatched_x: NDArray[np.int64]
    unmatched_y: NDArray[np.int64]

    def __len__(self) -> int:
        return len(self.pairs)


def affinity(feats_x: Tensor, feats_y: Tensor, weight: Tensor) -> Tensor:
    """Bilinear affinity A_ij = feats_x[i] . weight . feats_y[j]."""
    d = weight.shape[0]
    if weight.shape != (d, d) or feats_x.shape[1] != d or feats_y.shape[1] != d:
        raise ValidationError(
            f"affinity: incompatible shapes {feats_x.shape}, {weight.shape}, "
            f"{feats_y.shape}"
        )
    return ad.matmul(ad.matmul(feats_x, weight), feats_y.T)


def augment_dustbins(scores: Tensor, z: Tensor) -> Tensor:
    """Append one dustbin row and column, every new cell holding the scalar z."""
    m, n = scores.shape
    z_col = Tensor(np.ones((m, 1))) * z
    z_row = Tensor(np.ones((1, n + 1))) * z
    return ad.concat([ad.concat([scores, z_col], axis=1), z_row], axis=0)


def sinkhorn(augmented: Tensor, max_iters: int = 100, tol: float = 1e-6) -> SoftAssignment:
    """Alternating row/column normalization of exp(augmented).

    The iteration runs in log space: a row pass subtracts each row's
    log-sum-exp, a column pass each column's, which normalizes exactly the
    same plan as dividing exp(augmented) by its row and column sums but
    survives inputs whose spread exceeds the range of exp (entries merely
    bottom out at 0 instead of turning whole rows into 0/0).  Convergence
    means every row and column of the plan sums to 1 within ``tol``; for a
    non-square input that state is unreachable (total row mass and column
    mass disagree), in which case iteration stops once the plan goes
    stationary and the result is flagged unconverged.
    """
    if max_iters < 1:
        raise ValidationError(f"max_iters must be >= 1, got {max_iters}")
    if tol <= 0.0:
        raise ValidationError(f"tol must be > 0, got {tol}")
    if augmented.data.ndim != 2:
        raise ValidationError(f"expected a 2-D matrix, got shape {augmented.shape}")

    log_plan = augmented - float(augmented.data.max())
    iterations = 0
    converged = False
    residual = np.inf
    previous = None
    for _ in range(max_iters):
        log_plan = log_plan - _logsumexp(log_plan, axis=1)
        log_plan = log_plan - _logsumexp(log_plan, axis=0)
        iterations += 1
        probs = np.exp(log_plan.data)
        row_dev = float(np.abs(probs.sum(axis=1) - 1.0).max())
        col_dev = float(np.abs(probs.sum(axis=0) - 1.0).max())
        residual = max(row_dev, col_dev)
        if residual <= tol:
            converged = True
            break
        # only abandon truly stationary iterates (non-square inputs can never
        # balance); the threshold must sit far below tol or a square matrix
        # could be cut off one step before its residual clears tol
        if previous is not None and float(np.abs(probs - previous).max()) <= 1e-15:
            break
        previous = probs
    plan = ad.exp(log_plan)
    m, n = augmented.shape[0] - 1, augmented.shape[1] - 1
    return SoftAssignment(
        augmented=plan,
        trimmed=ad.crop2d(plan, m, n),
        iterations=iterations,
        converged=converged,
        residual=residual,
        log_augmented=log_plan,
        log_trimmed=ad.crop2d(log_plan, m, n),
    )


def hard_assign(soft: SoftAssignment | NDArray[np.float64], threshold: float = 0.7) -> CorrespondenceSet:
    """Thresholded mutual-argmax selection over the trimmed assignment matrix."""
    if not 0.0 < threshold < 1.0:
        raise ValidationError(f"threshold must be in (0, 1), got {threshold}")
    scores = soft.trimmed.data if isinstance(soft, SoftAssignment) else np.asarray(soft, dtype=np.float64)
    m, n = scores.shape
    pairs: list[tuple[int, int]] = []
    if m and n:
        row_best = scores.argmax(axis=1)
        col_best = scores.argmax(axis=0)
        for i in range(m):
            j = row_best[i]
            if col_best[j] == i and scores[i, j] > threshold:
                pairs.append((i, int(j)))
    pair_arr = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
    assert len(np.unique(pair_arr[:, 0])) == len(pair_arr)
    assert len(np.unique(pair_arr[:, 1])) == len(pair_arr)
    matched_x = set(pair_arr[:, 0].tolist())
    matched_y = set(pair_arr[:, 1].tolist())
    return CorrespondenceSet(
        pairs=pair_arr,
        scores=scores[pair_arr[:, 0], pair_arr[:, 1]] if len(pair_arr) else np.zeros(0),
        unmatched_x=np.asarray([i for i in range(m) if i not in matched_x], dtype=np.int64),
        unmatched_y=np.asarray([j for j in range(n) if j not in matched_y], dtype=np.int64),
    )


def hungarian_assign(scores: NDArray[np.float64], maximize: bool = True) -> list[tuple[int, int]]:
    """Exact optimal one-to-one assignment (reference implementation for tests)."""
    scores = np.asarray(scores, dtype=np.float64)
    if not np.isfinite(scores).all():
        raise ValidationError("hungarian_assign requires finite scores")
    rows, cols = linear_sum_assignment(scores, maximize=maximize)
    return [(int(i), int(j)) for i, j in zip(rows, cols)]


def format_correspondences(corr: CorrespondenceSet) -> str:
    """Text dump: one ``i j score`` line per pair, then unmatched lists."""
    lines = [f"{int(i)} {int(j)} {s:.6f}" for (i, j), s in zip(corr.pairs, corr.scores)]
    lines.append("unmatched_x " + " ".join(str(int(i)) for i in corr.unmatched_x))
    lines.append("unmatched_y " + " ".join(str(int(j)) for j in corr.unmatched_y))
    return "\n".join(lines) + "\n"


def soft_assign_graphs(
    model: MatchingModel,
    graph_x: InstanceGraph,
    graph_y: InstanceGraph,
    config: MatchConfig | None = None,
) -> SoftAssignment:
    """Full soft-matching pass: features, affinity, dustbins, normalization.

    Shared by the training loop and the registration pipeline so both sides
    see the identical differentiable path.
    """
    config = config if config is not None else MatchConfig()
    feats_x, feats_y = extract_features(model, graph_x, graph_y)
    scores = affinity(feats_x.fused, feats_y.fused, model.params["affinity.W"])
    augmented = augment_dustbins(scores, model.params["dustbin.z"])
    return sinkhorn(augmented, config.sinkhorn_max_iters, config.sinkhorn_tol)
