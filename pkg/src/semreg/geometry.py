"""Rigid-body geometry for point cloud registration.

Conventions used throughout the package:

* points are float64 arrays of shape (N, 3), one point per row
* a rigid transform maps a source point p to ``R @ p + t``
* rotation errors are reported in degrees, translation errors in meters
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TypeAlias

import numpy as np
from numpy.typing import NDArray
from scipy.spatial import cKDTree

from .errors import ValidationError

F64: TypeAlias = np.float64
Points: TypeAlias = NDArray[F64]  # Expected shape: (N, 3)
Vec3: TypeAlias = NDArray[F64]  # Expected shape: (3,)
Mat3: TypeAlias = NDArray[F64]  # Expected shape: (3, 3)

_ORTHONORMALITY_TOL = 1e-9


def as_points(arr: object, name: str = "points") -> Points:
    """Convert to a contiguous (N, 3) float64 array, rejecting non-finite rows."""
    out = np.ascontiguousarray(arr, dtype=np.float64)
    if out.ndim == 1 and out.size == 3:
        out = out.reshape(1, 3)
    if out.ndim != 2 or out.shape[1] != 3:
        raise ValidationError(f"{name} must have shape (N, 3), got {out.shape}")
    finite = np.isfinite(out).all(axis=1)
    if not finite.all():
        bad = int(np.flatnonzero(~finite)[0])
        raise ValidationError(f"{name}[{bad}] is non-finite")
    return out


# ---------------------------------------------------------------------------
# Core containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True, slots=True)
class PointCloud:
    """Immutable point set; ``intensity`` is optional per-point reflectance."""

    points: Points
    intensity: NDArray[F64] | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "points", as_points(self.points))
        if self.intensity is not None:
            inten = np.ascontiguousarray(self.intensity, dtype=np.float64)
            if inten.shape != (len(self.points),):
                raise ValidationError(
                    f"intensity length {inten.shape} does not match "
                    f"{len(self.points)} points"
                )
            object.__setattr__(self, "intensity", inten)

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, slots=True)
class RigidTransform:
    """Proper rigid motion: ``p -> rotation @ p + translation``."""

    rotation: Mat3
    translation: Vec3

    def __post_init__(self) -> None:
        rot = np.ascontiguousarray(self.rotation, dtype=np.float64)
        trans = np.ascontiguousarray(self.translation, dtype=np.float64)
        if rot.shape != (3, 3):
            raise ValidationError(f"rotation must be (3, 3), got {rot.shape}")
        if trans.shape != (3,):
            raise ValidationError(f"translation must be (3,), got {trans.shape}")
        if not (np.isfinite(rot).all() and np.isfinite(trans).all()):
            raise ValidationError("transform has non-finite entries")
        dev = np.abs(rot.T @ rot - np.eye(3)).max()
        if dev > _ORTHONORMALITY_TOL:
            raise ValidationError(f"rotation is not orthonormal (deviation {dev:.3e})")
        if np.linalg.det(rot) < 0.0:
            raise ValidationError("rotation has determinant -1 (reflection)")
        object.__setattr__(self, "rotation", rot)
        object.__setattr__(self, "translation", trans)

    @classmethod
    def identity(cls) -> "RigidTransform":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, mat: NDArray[F64]) -> "RigidTransform":
        """Build from a 3x4 or 4x4 homogeneous matrix."""
        mat = np.asarray(mat, dtype=np.float64)
        if mat.shape not in ((3, 4), (4, 4)):
            raise ValidationError(f"expected (3, 4) or (4, 4) matrix, got {mat.shape}")
        return cls(mat[:3, :3], mat[:3, 3])

    def as_matrix(self) -> NDArray[F64]:
        """Return the 4x4 homogeneous matrix."""
        mat = np.eye(4)
        mat[:3, :3] = self.rotation
        mat[:3, 3] = self.translation
        return mat

    def compose(self, other: "RigidTransform") -> "RigidTransform":
        """Return the transform applying ``other`` first, then ``self``."""
        return RigidTransform(
            self.rotation @ other.rotation,
            self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "RigidTransform":
        rot_inv = self.rotation.T
        return RigidTransform(rot_inv, -rot_inv @ self.translation)

    def apply(self, points: Points | PointCloud) -> Points:
        return apply_transform(self, points)


def apply_transform(transform: RigidTransform, points: Points | PointCloud) -> Points:
    """Apply a rigid transform to every point; rejects non-finite input."""
    if isinstance(points, PointCloud):
        points = points.points
    pts = as_points(points)
    return pts @ transform.rotation.T + transform.translation


# ---------------------------------------------------------------------------
# Rotation helpers
# ---------------------------------------------------------------------------


def rotation_about_axis(axis: int, angle_rad: float) -> Mat3:
    """Elementary rotation about the x (0), y (1) or z (2) axis."""
    c, s = np.cos(angle_rad), np.sin(angle_rad)
    if axis == 0:
        return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])
    if axis == 1:
        return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])
    if axis == 2:
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    raise ValidationError(f"axis must be 0, 1 or 2, got {axis}")


def rotation_xyz(alpha: float, beta: float, gamma: float) -> Mat3:
    """Rotation composed from intrinsic x-y-z Euler angles (radians)."""
    return (
        rotation_about_axis(0, alpha)
        @ rotation_about_axis(1, beta)
        @ rotation_about_axis(2, gamma)
    )


def euler_xyz(rotation: Mat3) -> Vec3:
    """Recover intrinsic x-y-z Euler angles (radians) from a rotation matrix.

    Near the gimbal-lock configuration (|R[0, 2]| -> 1) the x and z angles
    are not separable; the x angle is then reported as 0 and the z angle
    absorbs the remaining rotation.
    """
    rot = np.asarray(rotation, dtype=np.float64)
    sin_beta = np.clip(rot[0, 2], -1.0, 1.0)
    beta = np.arcsin(sin_beta)
    if abs(sin_beta) < 1.0 - 1e-12:
        alpha = np.arctan2(-rot[1, 2], rot[2, 2])
        gamma = np.arctan2(-rot[0, 1], rot[0, 0])
    else:
        alpha = 0.0
        gamma = np.arctan2(rot[1, 0], rot[1, 1]) * np.sign(sin_beta)
    return np.array([alpha, beta, gamma])


def random_transform(
    rng: np.random.Generator,
    max_angle_deg: float = 180.0,
    max_translation: float = 10.0,
) -> RigidTransform:
    """Draw a random proper rotation (uniform axis, bounded angle) and translation."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(-1.0, 1.0) * np.deg2rad(max_angle_deg)
    k = np.array(
        [
            [0.0, -axis[2], axis[1]],
            [axis[2], 0.0, -axis[0]],
            [-axis[1], axis[0], 0.0],
        ]
    )
    rot = np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)
    trans = rng.uniform(-max_translation, max_translation, size=3)
    return RigidTransform(rot, trans)


# ---------------------------------------------------------------------------
# Alignment solvers
# ---------------------------------------------------------------------------


def kabsch_svd(src: Points, dst: Points) -> RigidTransform:
    """Least-squares rigid alignment of ``src`` onto ``dst`` (no scaling).

    Both inputs are corresponding point lists of equal length N >= 3.  The
    solution minimizes sum ||R src_i + t - dst_i||^2 via SVD of the centered
    cross-covariance; a reflection in the SVD solution is repaired by
    negating the last singular direction so that det(R) = +1.
    """
    src = as_points(src, "src")
    dst = as_points(dst, "dst")
    if len(src) != len(dst):
        raise ValidationError(f"src has {len(src)} points but dst has {len(dst)}")
    if len(src) < 3:
        raise ValidationError(f"need at least 3 correspondences, got {len(src)}")
    centroid_src = src.mean(axis=0)
    centroid_dst = dst.mean(axis=0)
    cross = (src - centroid_src).T @ (dst - centroid_dst)
    u, sing, vt = np.linalg.svd(cross)
    if sing[1] <= 1e-12 * max(sing[0], 1.0):
        raise ValidationError(
            "degenerate correspondence configuration (points are collinear "
            "or coincident); rotation is not determined"
        )
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    trans = centroid_dst - rot @ centroid_src
    return RigidTransform(rot, trans)


@dataclass(frozen=True, slots=True)
class ICPParams:
    max_iters: int = 50
    convergence_eps: float = 1e-6
    max_corr_dist: float = 2.0


@dataclass(frozen=True, slots=True)
class ICPResult:
    transform: RigidTransform
    rms: float
    rms_history: tuple[float, ...] = field(repr=False)
    iterations: int
    converged: bool
    num_correspondences: int


def icp_refine(
    src: Points | PointCloud,
    dst: Points | PointCloud,
    init: RigidTransform | None = None,
    params: ICPParams = ICPParams(),
) -> ICPResult:
    """Point-to-point ICP starting from ``init``.

    Each iteration matches every transformed source point to its nearest
    destination point, drops pairs farther than ``max_corr_dist``, realigns
    the matched pairs with :func:`kabsch_svd` and composes the update onto
    the running transform.  The recorded RMS is the residual of the matched
    pairs after the update.  Iteration stops when the RMS change falls below
    ``convergence_eps`` (or the RMS itself does), else at ``max_iters`` with
    ``converged=False`` and the best transform found so far.
    """
    if isinstance(src, PointCloud):
        src = src.points
    if isinstance(dst, PointCloud):
        dst = dst.points
    src = as_points(src, "src")
    dst = as_points(dst, "dst")
    if len(src) == 0 or len(dst) == 0:
        raise ValidationError("icp_refine requires non-empty clouds")
    transform = RigidTransform.identity() if init is None else init

    tree = cKDTree(dst)
    history: list[float] = []
    prev_rms = np.inf
    converged = False
    num_kept = 0
    for _ in range(params.max_iters):
        moved = apply_transform(transform, src)
        dist, idx = tree.query(moved)
        keep = dist <= params.max_corr_dist
        num_kept = int(keep.sum())
        if num_kept < 3:
            raise ValidationError(
                f"only {num_kept} correspondences within "
                f"{params.max_corr_dist} m; cannot refine"
            )
        matched_src = moved[keep]
        matched_dst = dst[idx[keep]]
        delta = kabsch_svd(matched_src, matched_dst)
        transform = delta.compose(transform)
        residual = apply_transform(delta, matched_src) - matched_dst
        rms = float(np.sqrt(np.mean(np.sum(residual**2, axis=1))))
        history.append(rms)
        if rms < params.convergence_eps or abs(prev_rms - rms) < params.convergence_eps:
            converged = True
            break
        prev_rms = rms
    return ICPResult(
        transform=transform,
        rms=history[-1],
        rms_history=tuple(history),
        iterations=len(history),
        converged=converged,
        num_correspondences=num_kept,
    )


# ---------------------------------------------------------------------------
# Registration error metrics
# ---------------------------------------------------------------------------


def rre(rotation: Mat3, rotation_gt: Mat3) -> float:
    """Relative rotation error in degrees.

    Sum of absolute intrinsic x-y-z Euler angles of the residual rotation
    ``rotation_gt^-1 @ rotation``.
    """
    RigidTransform(rotation, np.zeros(3))
    RigidTransform(rotation_gt, np.zeros(3))
    delta = np.asarray(rotation_gt, dtype=np.float64).T @ np.asarray(
        rotation, dtype=np.float64
    )
    return float(np.sum(np.abs(np.rad2deg(euler_xyz(delta)))))


def rte(translation: Vec3, translation_gt: Vec3) -> float:
    """Relative translation error: Euclidean distance in meters."""
    t = np.asarray(translation, dtype=np.float64).reshape(3)
    t_gt = np.asarray(translation_gt, dtype=np.float64).reshape(3)
    return float(np.linalg.norm(t_gt - t))


def transform_errors(
    transform: RigidTransform, transform_gt: RigidTransform
) -> tuple[float, float]:
    """(RRE degrees, RTE meters) of ``transform`` against ground truth."""
    return (
        rre(transform.rotation, transform_gt.rotation),
        rte(transform.translation, transform_gt.translation),
    )


# ---------------------------------------------------------------------------
# Neighborhood selection
# ---------------------------------------------------------------------------


def knn(points: Points, queries: Points, k: int) -> tuple[NDArray[np.int64], Points]:
    """k nearest ``points`` for each query, sorted by distance.

    Exact brute-force search.  Distance ties are broken by the smaller point
    index, which makes the output reproducible across platforms.  Returns
    ``(indices, distances)`` of shape (Q, k); k is clamped to len(points).
    """
    points = as_points(points)
    queries = as_points(queries, "queries")
    if len(points) == 0:
        raise ValidationError("knn requires a non-empty point set")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    k = min(k, len(points))
    diff = queries[:, None, :] - points[None, :, :]
    dist = np.sqrt(np.sum(diff * diff, axis=2))
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    return order.astype(np.int64), np.take_along_axis(dist, order, axis=1)


def fps(points: Points, k: int) -> NDArray[np.int64]:
    """Farthest point sampling of ``k`` indices, seeded at index 0.

    Each step picks the point with the largest distance to the selected set;
    ties go to the smaller index.  If sampling is asked for more points than
    exist, every index is returned in selection order followed by repeats of
    the seed index 0, so the result always has length ``k``.
    """
    points = as_points(points)
    n = len(points)
    if n == 0:
        raise ValidationError("fps requires a non-empty point set")
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    take = min(k, n)
    selected = np.empty(take, dtype=np.int64)
    selected[0] = 0
    min_dist = np.linalg.norm(points - points[0], axis=1)
    for i in range(1, take):
        nxt = int(np.argmax(min_dist))  # argmax takes the first (smallest) index on ties
        selected[i] = nxt
        np.minimum(min_dist, np.linalg.norm(points - points[nxt], axis=1), out=min_dist)
    if take < k:
        return np.concatenate([selected, np.zeros(k - take, dtype=np.int64)])
    return selected
