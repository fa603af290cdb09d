"""End-to-end registration of scene pairs and evaluation over datasets.

Registration is coarse-to-fine: a least-squares alignment of matched
instance centroids gives the coarse transform, and point-to-point ICP on
the raw clouds, started from the coarse estimate, gives the fine one.
Pairs with too few instances or too few correspondences are skipped with a
reason instead of producing a garbage transform.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from numpy.typing import NDArray

from . import autodiff as ad
from .errors import ValidationError
from .geometry import (
    ICPParams,
    RigidTransform,
    icp_refine,
    kabsch_svd,
    transform_errors,
)
from .graph import build_graph
from .instances import CategoryConfig, SemanticInstance, SemanticPointCloud, default_category_config, extract_instances
from .matching import CorrespondenceSet, MatchConfig, hard_assign, soft_assign_graphs
from .networks import MatchingModel

__all__ = [
    "PipelineConfig",
    "RegistrationResult",
    "EvalPair",
    "PairEval",
    "EvalReport",
    "register_pair",
    "inlier_precision",
    "inlier_recall",
    "registration_recall",
    "evaluate",
    "format_report",
]


@dataclass(frozen=True)
class PipelineConfig:
    """Knobs for the registration pipeline and its evaluation thresholds."""

    min_instances: int = 5  # per side; fewer means the pair is skipped
    min_correspondences: int = 3  # kabsch needs 3 non-degenerate pairs
    score_threshold: float = 0.7
    k_shape_points: int = 128
    k_neighbors: int = 10
    beta: float = 1.0  # inlier radius for precision/recall, meters
    t_rre_deg: float = 5.0  # success thresholds for registration recall
    t_rte_m: float = 2.0
    sinkhorn_max_iters: int = 100
    sinkhorn_tol: float = 1e-6
    icp: ICPParams = field(default_factory=ICPParams)

    def __post_init__(self) -> None:
        if self.min_instances < 1:
            raise ValidationError("min_instances must be >= 1")
        if self.min_correspondences < 3:
            raise ValidationError("min_correspondences must be >= 3")
        if self.beta <= 0.0 or self.t_rre_deg <= 0.0 or self.t_rte_m <= 0.0:
            raise ValidationError("beta and success thresholds must be positive")

    def match_config(self) -> MatchConfig:
        return MatchConfig(
            score_threshold=self.score_threshold,
            sinkhorn_max_iters=self.sinkhorn_max_iters,
            sinkhorn_tol=self.sinkhorn_tol,
        )


@dataclass(frozen=True, slots=True)
class RegistrationResult:
    """Outcome of one pair registration with full diagnostics.

    ``fine`` is set only when the coarse alignment succeeded and ICP ran to
    completion; an ICP failure leaves ``fine`` as None with the message in
    ``icp_error``.
    """

    coarse: RigidTransform | None
    fine: RigidTransform | None
    correspondences: CorrespondenceSet | None
    instances_x: tuple[SemanticInstance, ...]
    instances_y: tuple[SemanticInstance, ...]
    num_correspondences: int
    sinkhorn_iterations: int
    sinkhorn_converged: bool
    icp_converged: bool | None
    icp_rms: float | None
    skipped: bool
    skip_reason: str | None
    icp_error: str | None = None

    @property
    def best(self) -> RigidTransform | None:
        """The transform to evaluate: fine when ICP ran, else coarse."""
        return self.fine if self.fine is not None else self.coarse


@dataclass(frozen=True, slots=True)
class EvalPair:
    """One evaluation item: two labeled scenes plus the true transform."""

    scene_x: SemanticPointCloud
    scene_y: SemanticPointCloud
    gt_transform: RigidTransform
    name: str = ""


@dataclass(frozen=True, slots=True)
class PairEval:
    """Per-pair evaluation record (line-delimited dump unit)."""

    name: str
    skipped: bool
    skip_reason: str | None
    rre_deg: float | None
    rte_m: float | None
    success: bool | None  # rre < t_rre and rte < t_rte; None when skipped
    inlier_precision: float | None
    inlier_recall: float | None
    num_correspondences: int
    num_instances_x: int
    num_instances_y: int


@dataclass(frozen=True, slots=True)
class EvalReport:
    """Aggregate metrics over a dataset; None marks an undefined aggregate."""

    pairs: tuple[PairEval, ...]
    num_total: int
    num_skipped: int
    num_evaluated: int
    mean_rre_deg: float | None
    std_rre_deg: float | None
    mean_rte_m: float | None
    std_rte_m: float | None
    median_rre_deg: float | None
    median_rte_m: float | None
    registration_recall: float | None
    mean_inlier_precision: float | None
    mean_inlier_recall: float | None
    num_empty_predictions: int  # pairs whose matcher returned no pairs at all


def register_pair(
    scene_x: SemanticPointCloud,
    scene_y: SemanticPointCloud,
    model: MatchingModel,
    config: PipelineConfig | None = None,
    categories: CategoryConfig | None = None,
) -> RegistrationResult:
    """Register scene X onto scene Y through the full matching stack.

    Extraction, graph construction, feature matching, then coarse centroid
    alignment and fine ICP.  The pair is skipped (never raises) when a side
    has fewer than ``min_instances`` instances or the matcher accepts fewer
    than ``min_correspondences`` pairs.
    """
    cfg = config if config is not None else PipelineConfig()
    categories = categories if categories is not None else default_category_config()

    inst_x = extract_instances(scene_x, categories, cfg.k_shape_points).instances
    inst_y = extract_instances(scene_y, categories, cfg.k_shape_points).instances

    def skipped(reason: str, corr=None, iters=0, converged=False) -> RegistrationResult:
        return RegistrationResult(
            coarse=None,
            fine=None,
            correspondences=corr,
            instances_x=inst_x,
            instances_y=inst_y,
            num_correspondences=0 if corr is None else len(corr),
            sinkhorn_iterations=iters,
            sinkhorn_converged=converged,
            icp_converged=None,
            icp_rms=None,
            skipped=True,
            skip_reason=reason,
        )

    if min(len(inst_x), len(inst_y)) < cfg.min_instances:
        return skipped(
            f"insufficient instances ({len(inst_x)} vs {len(inst_y)}, "
            f"need {cfg.min_instances})"
        )

    with ad.no_grad():
        soft = soft_assign_graphs(
            model,
            build_graph(list(inst_x), cfg.k_neighbors),
            build_graph(list(inst_y), cfg.k_neighbors),
            cfg.match_config(),
        )
    corr = hard_assign(soft, cfg.score_threshold)
    if len(corr) < cfg.min_correspondences:
        return skipped(
            f"insufficient correspondences ({len(corr)}, need {cfg.min_correspondences})",
            corr,
            soft.iterations,
            soft.converged,
        )

    cent_x = np.stack([inst_x[i].centroid for i in corr.pairs[:, 0]])
    cent_y = np.stack([inst_y[j].centroid for j in corr.pairs[:, 1]])
    coarse = kabsch_svd(cent_x, cent_y)

    fine = None
    icp_converged: bool | None = None
    icp_rms: float | None = None
    icp_error: str | None = None
    try:
        icp = icp_refine(scene_x.cloud.points, scene_y.cloud.points, coarse, cfg.icp)
        fine = icp.transform
        icp_converged = icp.converged
        icp_rms = icp.rms
    except ValidationError as exc:  # no overlap within reach: keep coarse
        icp_error = str(exc)

    return RegistrationResult(
        coarse=coarse,
        fine=fine,
        correspondences=corr,
        instances_x=inst_x,
        instances_y=inst_y,
        num_correspondences=len(corr),
        sinkhorn_iterations=soft.iterations,
        sinkhorn_converged=soft.converged,
        icp_converged=icp_converged,
        icp_rms=icp_rms,
        skipped=False,
        skip_reason=None,
        icp_error=icp_error,
    )


def _centroids(instances: tuple[SemanticInstance, ...] | list[SemanticInstance]) -> NDArray[np.float64]:
    return np.stack([inst.centroid for inst in instances])


def inlier_precision(
    pred_pairs: NDArray[np.int64],
    instances_x: tuple[SemanticInstance, ...] | list[SemanticInstance],
    instances_y: tuple[SemanticInstance, ...] | list[SemanticInstance],
    gt: RigidTransform,
    beta: float = 1.0,
) -> float:
    """Fraction of predicted pairs whose centroids land within ``beta`` under gt.

    An empty prediction scores 0.0 by definition; callers that need to
    distinguish "no predictions" from "all wrong" should check the pair
    count themselves (evaluate() reports it as num_empty_predictions).
    """
    if beta <= 0.0:
        raise ValidationError(f"beta must be > 0, got {beta}")
    pred = np.asarray(pred_pairs, dtype=np.int64).reshape(-1, 2)
    if len(pred) == 0:
        return 0.0
    moved = gt.apply(_centroids(instances_x)[pred[:, 0]])
    dist = np.linalg.norm(moved - _centroids(instances_y)[pred[:, 1]], axis=1)
    return float(np.mean(dist < beta))


def inlier_recall(
    pred_pairs: NDArray[np.int64],
    gt_pairs: NDArray[np.int64],
    instances_x: tuple[SemanticInstance, ...] | list[SemanticInstance],
    instances_y: tuple[SemanticInstance, ...] | list[SemanticInstance],
    gt: RigidTransform,
    beta: float = 1.0,
) -> float | None:
    """Fraction of ground-truth pairs recovered by the prediction within ``beta``.

    Undefined (None) when there are no ground-truth pairs; such pairs are
    excluded from aggregate recall.
    """
    if beta <= 0.0:
        raise ValidationError(f"beta must be > 0, got {beta}")
    gt_arr = np.asarray(gt_pairs, dtype=np.int64).reshape(-1, 2)
    if len(gt_arr) == 0:
        return None
    predicted = {(int(i), int(j)) for i, j in np.asarray(pred_pairs, dtype=np.int64).reshape(-1, 2)}
    if not predicted:
        return 0.0
    moved = gt.apply(_centroids(instances_x)[gt_arr[:, 0]])
    dist = np.linalg.norm(moved - _centroids(instances_y)[gt_arr[:, 1]], axis=1)
    hit = sum(
        1
        for (i, j), d in zip(gt_arr, dist)
        if (int(i), int(j)) in predicted and d < beta
    )
    return hit / len(gt_arr)


def registration_recall(
    results: list[PairEval] | tuple[PairEval, ...],
    t_rre_deg: float = 5.0,
    t_rte_m: float = 2.0,
) -> float | None:
    """Fraction of non-skipped pairs registered within both error thresholds.

    None when every pair was skipped (the denominator is empty).
    """
    evaluated = [p for p in results if not p.skipped and p.rre_deg is not None]
    if not evaluated:
        return None
    good = sum(1 for p in evaluated if p.rre_deg < t_rre_deg and p.rte_m < t_rte_m)
    return good / len(evaluated)


def _evaluate_one(
    item: EvalPair,
    model: MatchingModel,
    cfg: PipelineConfig,
    categories: CategoryConfig | None,
) -> PairEval:
    from .training import label_gt_correspondences

    result = register_pair(item.scene_x, item.scene_y, model, cfg, categories)
    gt_pairs, _, _ = label_gt_correspondences(
        result.instances_x, result.instances_y, item.gt_transform, cfg.beta
    )
    pred = result.correspondences.pairs if result.correspondences is not None else np.zeros((0, 2), np.int64)
    precision = inlier_precision(
        pred, result.instances_x, result.instances_y, item.gt_transform, cfg.beta
    )
    recall = inlier_recall(
        pred, gt_pairs, result.instances_x, result.instances_y, item.gt_transform, cfg.beta
    )
    if result.skipped or result.best is None:
        return PairEval(
            name=item.name,
            skipped=True,
            skip_reason=result.skip_reason,
            rre_deg=None,
            rte_m=None,
            success=None,
            inlier_precision=precision,
            inlier_recall=recall,
            num_correspondences=result.num_correspondences,
            num_instances_x=len(result.instances_x),
            num_instances_y=len(result.instances_y),
        )
    rre_deg, rte_m = transform_errors(result.best, item.gt_transform)
    return PairEval(
        name=item.name,
        skipped=False,
        skip_reason=None,
        rre_deg=rre_deg,
        rte_m=rte_m,
        success=bool(rre_deg < cfg.t_rre_deg and rte_m < cfg.t_rte_m),
        inlier_precision=precision,
        inlier_recall=recall,
        num_correspondences=result.num_correspondences,
        num_instances_x=len(result.instances_x),
        num_instances_y=len(result.instances_y),
    )


def evaluate(
    items: list[EvalPair],
    model: MatchingModel,
    config: PipelineConfig | None = None,
    categories: CategoryConfig | None = None,
    threads: int = 1,
) -> EvalReport:
    """Register and score every pair, then aggregate the five metrics.

    Per-pair failures are recorded in the report, never raised.  With
    ``threads`` > 1 pairs run concurrently; aggregation happens in input
    order, so the report is identical either way.
    """
    cfg = config if config is not None else PipelineConfig()
    if threads < 1:
        raise ValidationError(f"threads must be >= 1, got {threads}")
    if threads == 1 or len(items) <= 1:
        evals = [_evaluate_one(item, model, cfg, categories) for item in items]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            evals = list(
                pool.map(lambda item: _evaluate_one(item, model, cfg, categories), items)
            )

    scored = [p for p in evals if not p.skipped]
    rres = np.array([p.rre_deg for p in scored], dtype=np.float64)
    rtes = np.array([p.rte_m for p in scored], dtype=np.float64)
    precisions = [p.inlier_precision for p in evals if p.inlier_precision is not None]
    recalls = [p.inlier_recall for p in evals if p.inlier_recall is not None]
    return EvalReport(
        pairs=tuple(evals),
        num_total=len(evals),
        num_skipped=len(evals) - len(scored),
        num_evaluated=len(scored),
        mean_rre_deg=float(rres.mean()) if len(scored) else None,
        std_rre_deg=float(rres.std()) if len(scored) else None,
        mean_rte_m=float(rtes.mean()) if len(scored) else None,
        std_rte_m=float(rtes.std()) if len(scored) else None,
        median_rre_deg=float(np.median(rres)) if len(scored) else None,
        median_rte_m=float(np.median(rtes)) if len(scored) else None,
        registration_recall=registration_recall(scored, cfg.t_rre_deg, cfg.t_rte_m),
        mean_inlier_precision=float(np.mean(precisions)) if precisions else None,
        mean_inlier_recall=float(np.mean(recalls)) if recalls else None,
        num_empty_predictions=sum(1 for p in evals if p.num_correspondences == 0),
    )


def _fmt(value: float | None, digits: int = 4) -> str:
    return "undefined" if value is None else f"{value:.{digits}f}"


def format_report(report: EvalReport) -> str:
    """Human-readable summary table of an evaluation report."""
    lines = [
        f"pairs evaluated   {report.num_evaluated} of {report.num_total} "
        f"({report.num_skipped} skipped)",
        f"RRE mean/std      {_fmt(report.mean_rre_deg)} / {_fmt(report.std_rre_deg)} deg",
        f"RTE mean/std      {_fmt(report.mean_rte_m)} / {_fmt(report.std_rte_m)} m",
        f"RRE median        {_fmt(report.median_rre_deg)} deg",
        f"RTE median        {_fmt(report.median_rte_m)} m",
        f"registration recall  {_fmt(report.registration_recall)}",
        f"inlier precision  {_fmt(report.mean_inlier_precision)}",
        f"inlier recall     {_fmt(report.mean_inlier_recall)}",
        f"empty predictions {report.num_empty_predictions}",
    ]
    return "\n".join(lines) + "\n"
