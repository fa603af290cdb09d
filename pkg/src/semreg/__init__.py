"""Semantic-graph registration of labeled outdoor point cloud pairs.

The pipeline clusters a labeled cloud into object instances, encodes each
instance graph with small learned networks, soft-assigns instances across
the two clouds by entropic optimal transport, and estimates the rigid
motion from matched centroids (closed form) plus a point-level refinement.

Typical use::

    from semreg import MatchingModel, register_pair

    result = register_pair(scene_x, scene_y, model)
    print(result.best.as_matrix())
"""

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import (
    ChecksumError,
    FormatError,
    SchemaError,
    TrainingDivergedError,
    ValidationError,
    VersionError,
)
from .geometry import (
    ICPParams,
    ICPResult,
    PointCloud,
    RigidTransform,
    icp_refine,
    kabsch_svd,
    rre,
    rte,
    transform_errors,
)
from .graph import InstanceGraph, build_graph
from .instances import (
    CategoryConfig,
    ExtractionResult,
    SemanticInstance,
    SemanticPointCloud,
    default_category_config,
    extract_instances,
)
from .kitti import (
    DatasetManifest,
    load_manifest,
    read_labels,
    read_poses,
    read_scan,
    relative_pose,
    write_labels,
    write_scan,
)
from .matching import (
    CorrespondenceSet,
    MatchConfig,
    SoftAssignment,
    affinity,
    augment_dustbins,
    hard_assign,
    hungarian_assign,
    sinkhorn,
    soft_assign_graphs,
)
from .networks import FeatureConfig, MatchingModel, extract_features
from .pipeline import (
    EvalPair,
    EvalReport,
    PairEval,
    PipelineConfig,
    RegistrationResult,
    evaluate,
    format_report,
    inlier_precision,
    inlier_recall,
    register_pair,
    registration_recall,
)
from .training import (
    EpochStats,
    SceneGenConfig,
    ScenePair,
    TrainConfig,
    generate_scene_pair,
    label_gt_correspondences,
    make_training_pairs,
    matching_loss,
    prepare_scene_pair,
    train,
)

__version__ = "0.1.0"

__all__ = [
    "ChecksumError",
    "FormatError",
    "SchemaError",
    "TrainingDivergedError",
    "ValidationError",
    "VersionError",
    "ICPParams",
    "ICPResult",
    "PointCloud",
    "RigidTransform",
    "icp_refine",
    "kabsch_svd",
    "rre",
    "rte",
    "transform_errors",
    "InstanceGraph",
    "build_graph",
    "CategoryConfig",
    "ExtractionResult",
    "SemanticInstance",
    "SemanticPointCloud",
    "default_category_config",
    "extract_instances",
    "FeatureConfig",
    "MatchingModel",
    "extract_features",
    "CorrespondenceSet",
    "MatchConfig",
    "SoftAssignment",
    "affinity",
    "augment_dustbins",
    "hard_assign",
    "hungarian_assign",
    "sinkhorn",
    "soft_assign_graphs",
    "PipelineConfig",
    "RegistrationResult",
    "EvalPair",
    "PairEval",
    "EvalReport",
    "register_pair",
    "evaluate",
    "format_report",
    "inlier_precision",
    "inlier_recall",
    "registration_recall",
    "EpochStats",
    "SceneGenConfig",
    "ScenePair",
    "TrainConfig",
    "generate_scene_pair",
    "label_gt_correspondences",
    "make_training_pairs",
    "matching_loss",
    "prepare_scene_pair",
    "train",
    "DatasetManifest",
    "load_manifest",
    "read_labels",
    "read_poses",
    "read_scan",
    "relative_pose",
    "write_labels",
    "write_scan",
    "load_checkpoint",
    "save_checkpoint",
    "__version__",
]
