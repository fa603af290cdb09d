"""Readers and writers for odometry-style scan, label, and pose files.

Scans are raw little-endian float32 quadruples (x, y, z, intensity), labels
are little-endian uint32 per point with the semantic class in the lower 16
bits, and poses are text lines of twelve numbers forming a row-major 3x4
[R | t] matrix.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np
from numpy.typing import NDArray

from .errors import FormatError, ValidationError
from .geometry import PointCloud, RigidTransform

__all__ = [
    "read_scan",
    "write_scan",
    "read_labels",
    "write_labels",
    "read_poses",
    "relative_pose",
    "SequenceFiles",
    "DatasetManifest",
    "load_manifest",
]

_POSE_ORTHONORMALITY_TOL = 1e-3


def read_scan(path: str | os.PathLike) -> PointCloud:
    """Parse a binary scan file into a point cloud, preserving point order."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) % 16 != 0:
        raise FormatError(
            f"{path}: scan size {len(raw)} is not a multiple of 16 bytes "
            f"(little-endian float32 x, y, z, intensity per point)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(-1, 4).astype(np.float64)
    return PointCloud(data[:, :3], data[:, 3])


def write_scan(path: str | os.PathLike, cloud: PointCloud) -> None:
    """Inverse of :func:`read_scan`; zero intensity when the cloud has none."""
    inten = cloud.intensity if cloud.intensity is not None else np.zeros(len(cloud))
    data = np.hstack([cloud.points, inten[:, None]]).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(data.tobytes())


def read_labels(path: str | os.PathLike, point_count: int) -> NDArray[np.int64]:
    """Parse per-point semantic labels, discarding the upper instance-id bits."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) != 4 * point_count:
        raise FormatError(
            f"{path}: label file holds {len(raw) // 4} entries "
            f"({len(raw)} bytes) but the scan has {point_count} points"
        )
    values = np.frombuffer(raw, dtype="<u4")
    return (values & 0xFFFF).astype(np.int64)


def write_labels(path: str | os.PathLike, labels: NDArray[np.int64]) -> None:
    """Inverse of :func:`read_labels` (instance-id bits written as zero)."""
    labels = np.asarray(labels)
    if labels.min(initial=0) < 0 or labels.max(initial=0) > 0xFFFF:
        raise ValidationError("semantic labels must fit in 16 bits")
    with open(path, "wb") as fh:
        fh.write(labels.astype("<u4").tobytes())


def _project_to_rotation(mat: NDArray[np.float64]) -> NDArray[np.float64]:
    u, _, vt = np.linalg.svd(mat)
    rot = u @ vt
    if np.linalg.det(rot) < 0.0:
        u[:, -1] = -u[:, -1]
        rot = u @ vt
    return rot


def read_poses(path: str | os.PathLike) -> list[RigidTransform]:
    """Parse a pose file: one row-major 3x4 [R | t] per nonempty line.

    Rotations are checked for orthonormality within 1e-3 and snapped to the
    nearest true rotation by SVD projection; anything farther off is a
    format error.
    """
    poses: list[RigidTransform] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            fields = line.split()
            if not fields:
                continue
            if len(fields) != 12:
                raise FormatError(
                    f"{path}:{line_no}: expected 12 numbers, got {len(fields)}"
                )
            try:
                values = np.array([float(f) for f in fields]).reshape(3, 4)
            except ValueError as exc:
                raise FormatError(f"{path}:{line_no}: {exc}") from exc
            rot, trans = values[:, :3], values[:, 3]
            dev = float(np.abs(rot.T @ rot - np.eye(3)).max())
            if dev > _POSE_ORTHONORMALITY_TOL:
                raise FormatError(
                    f"{path}:{line_no}: rotation deviates from orthonormal "
                    f"by {dev:.2e} (tolerance {_POSE_ORTHONORMALITY_TOL})"
                )
            poses.append(RigidTransform(_project_to_rotation(rot), trans))
    return poses


def relative_pose(
    pose_a: RigidTransform,
    pose_b: RigidTransform,
    extrinsic: RigidTransform | None = None,
) -> RigidTransform:
    """Motion from frame a to frame b: pose_a^-1 composed with pose_b.

    ``extrinsic`` maps sensor coordinates into the pose frame (identity when
    omitted); the result is expressed in sensor coordinates either way.
    """
    rel = pose_a.inverse().compose(pose_b)
    if extrinsic is not None:
        rel = extrinsic.inverse().compose(rel).compose(extrinsic)
    return rel


@dataclass(frozen=True, slots=True)
class SequenceFiles:
    """One sequence: aligned scan/label file lists plus the pose file."""

    scan_dir: str
    label_dir: str
    pose_file: str
    scans: tuple[str, ...]
    labels: tuple[str, ...]


@dataclass(frozen=True, slots=True)
class DatasetManifest:
    """Sequence listing plus the frame stride used to form evaluation pairs."""

    sequences: tuple[SequenceFiles, ...]
    stride: int

    def pairs(self) -> list[tuple[SequenceFiles, int, int]]:
        """All (sequence, frame a, frame b) index pairs under the stride."""
        out = []
        for seq in self.sequences:
            for a in range(0, len(seq.scans) - self.stride):
                out.append((seq, a, a + self.stride))
        return out


def load_manifest(path: str | os.PathLike, stride: int = 1) -> DatasetManifest:
    """Read a manifest: one ``scan_dir label_dir pose_file`` line per sequence.

    Scan and label directories are listed and sorted by file name; the two
    listings must have equal length.  Blank lines and ``#`` comments are
    skipped.
    """
    if stride < 1:
        raise ValidationError(f"stride must be >= 1, got {stride}")
    sequences: list[SequenceFiles] = []
    base = os.path.dirname(os.fspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            text = line.strip()
            if not text or text.startswith("#"):
                continue
            fields = text.split()
            if len(fields) != 3:
                raise FormatError(
                    f"{path}:{line_no}: expected 'scan_dir label_dir pose_file', "
                    f"got {len(fields)} fields"
                )
            scan_dir, label_dir, pose_file = (
                os.path.join(base, f) if not os.path.isabs(f) else f for f in fields
            )
            scans = tuple(
                os.path.join(scan_dir, name)
                for name in sorted(os.listdir(scan_dir))
                if name.endswith(".bin")
            )
            labels = tuple(
                os.path.join(label_dir, name)
                for name in sorted(os.listdir(label_dir))
                if name.endswith(".label")
            )
            if len(scans) != len(labels):
                raise FormatError(
                    f"{path}:{line_no}: {len(scans)} scans but {len(labels)} labels"
                )
            sequences.append(
                SequenceFiles(scan_dir, label_dir, pose_file, scans, labels)
            )
    return DatasetManifest(tuple(sequences), stride)
