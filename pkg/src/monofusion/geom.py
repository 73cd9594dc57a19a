"""Pinhole camera model, rigid poses, and projection primitives.

Conventions used throughout the package:

  World frame   : right-handed, meters. Z is "up" for the synthetic scenes,
                  but nothing in this module assumes a gravity direction.
  Camera frame  : X right, Y down, Z forward (optical axis), standard CV.
  Pose          : world-from-camera. ``x_world = R @ x_cam + t``. The camera
                  center in world coordinates is ``t``.
  Pixels        : continuous coordinates; the pixel at integer index
                  ``(i, j)`` (column i, row j) covers ``[i, i+1) x [j, j+1)``
                  and its center sits at ``(i + 0.5, j + 0.5)``.
  Image bounds  : half-open, ``u in [0, width)`` and ``v in [0, height)``.
                  Points projecting exactly onto the right/bottom edge are
                  out of frustum.
  Depth         : camera-frame z coordinate (z-depth, not ray length).

All geometry is float64; callers that need float32 downcast at their end.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ORTHONORMAL_TOL = 1e-9


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics. Focal lengths and principal point in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 < self.cx < self.width):
            raise ValueError(f"cx={self.cx} outside (0, {self.width})")
        if not (0 < self.cy < self.height):
            raise ValueError(f"cy={self.cy} outside (0, {self.height})")


@dataclass(frozen=True)
class PixelCoord:
    """Continuous pixel coordinate (u along width, v along height)."""

    u: float
    v: float


@dataclass(frozen=True)
class Pose:
    """Rigid world-from-camera transform: rotation matrix + translation."""

    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if r.shape != (3, 3):
            raise ValueError(f"rotation must be 3x3, got {r.shape}")
        if not np.allclose(r.T @ r, np.eye(3), atol=ORTHONORMAL_TOL, rtol=0):
            raise ValueError("rotation is not orthonormal within 1e-9")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError(f"rotation determinant {np.linalg.det(r)} != +1")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Pose":
        """Build from a 3x4 or 4x4 [R|t] matrix (world-from-camera)."""
        m = np.asarray(m, dtype=np.float64)
        return cls(m[:3, :3], m[:3, 3])

    def matrix(self) -> np.ndarray:
        """Return the 3x4 row-major [R|t]."""
        return np.hstack([self.rotation, self.translation[:, None]])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation


def pose_compose(a: Pose, b: Pose) -> Pose:
    """Composition a∘b: apply b first, then a."""
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def pose_inverse(a: Pose) -> Pose:
    return Pose(a.rotation.T, -(a.rotation.T @ a.translation))


def rotation_about_axis(axis: np.ndarray, angle: float) -> np.ndarray:
    """Rodrigues rotation matrix for a (not necessarily unit) axis."""
    axis = np.asarray(axis, dtype=np.float64)
    n = np.linalg.norm(axis)
    if n == 0:
        return np.eye(3)
    x, y, z = axis / n
    k = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def rotation_angle(r: np.ndarray) -> float:
    """Rotation angle in radians of a rotation matrix."""
    c = (np.trace(r) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def project(k: Intrinsics, pose: Pose, point: np.ndarray):
    """Project a world point through (k, pose).

    Returns ``(PixelCoord, depth)`` if the point is in front of the camera
    and inside the half-open image bounds, else ``None``. Absence is a
    value, not an error.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.translation)
    z = p_cam[2]
    if z <= 0.0:
        return None
    u = k.fx * p_cam[0] / z + k.cx
    v = k.fy * p_cam[1] / z + k.cy
    if not (0.0 <= u < k.width and 0.0 <= v < k.height):
        return None
    return PixelCoord(float(u), float(v)), float(z)


def backproject(k: Intrinsics, pose: Pose, px: PixelCoord, depth: float) -> np.ndarray:
    """Lift a pixel at a given z-depth to a world point.

    Inverse of :func:`project` on the visible domain.
    """
    if depth <= 0.0:
        raise ValueError(f"depth must be positive, got {depth}")
    p_cam = np.array(
        [depth * (px.u - k.cx) / k.fx, depth * (px.v - k.cy) / k.fy, depth],
        dtype=np.float64,
    )
    return pose.rotation @ p_cam + pose.translation


def project_points(k: Intrinsics, pose: Pose, points: np.ndarray):
    """Vectorized projection of an (N, 3) world point array.

    Returns ``(uv (N, 2), depth (N,), valid (N,))``. Entries with
    ``valid == False`` hold undefined uv/depth values. The validity rule is
    identical to the scalar :func:`project`.
    """
    points = np.asarray(points, dtype=np.float64)
    p_cam = (points - pose.translation) @ pose.rotation  # == R.T @ (p - t) per row
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * p_cam[:, 0] / z + k.cx
        v = k.fy * p_cam[:, 1] / z + k.cy
    valid = (z > 0.0) & (u >= 0.0) & (u < k.width) & (v >= 0.0) & (v < k.height)
    return np.stack([u, v], axis=1), z, valid


def save_intrinsics(path, k: Intrinsics) -> None:
    """Single line: ``fx fy cx cy width height``."""
    with open(path, "w") as f:
        f.write(f"{k.fx:.17g} {k.fy:.17g} {k.cx:.17g} {k.cy:.17g} {k.width} {k.height}\n")


def load_intrinsics(path) -> Intrinsics:
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise ValueError(f"intrinsics file must hold 6 values, got {len(parts)}")
    fx, fy, cx, cy = (float(p) for p in parts[:4])
    return Intrinsics(fx, fy, cx, cy, int(float(parts[4])), int(float(parts[5])))


def save_poses(path, poses) -> None:
    """One pose per line: 12 decimals, row-major 3x4 [R|t], world-from-camera."""
    with open(path, "w") as f:
        for pose in poses:
            f.write(" ".join(f"{x:.17g}" for x in pose.matrix().ravel()) + "\n")


def load_poses(path) -> list:
    poses = []
    with open(path) as f:
        for ln, line in enumerate(f):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 12:
                raise ValueError(f"pose line {ln}: expected 12 values, got {len(parts)}")
            m = np.array([float(p) for p in parts], dtype=np.float64).reshape(3, 4)
            poses.append(Pose.from_matrix(m))
    return poses
