# src/chordgraph/geometry.py
"""SE(3) poses and the small amount of geometry shared by the solvers and the world."""

from __future__ import annotations

from dataclasses import dataclass
import math
from typing import Iterable, Sequence

import numpy as np
from numpy.typing import NDArray
from scipy.spatial.transform import Rotation, Slerp

Vector = NDArray[np.float64]

UP = np.array([0.0, 0.0, 1.0])
GRAVITY_DIR = np.array([0.0, 0.0, -1.0])

# Gripper pointing straight down (tool z-axis along -z): rotation of pi about x.
TOP_DOWN_QUAT: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
IDENTITY_QUAT: tuple[float, float, float, float] = (0.0, 0.0, 0.0, 1.0)


def _as_tuple3(values: Iterable[float]) -> tuple[float, float, float]:
    x, y, z = (float(v) for v in values)
    return (x, y, z)


def _normalize_quat(quat: Sequence[float]) -> tuple[float, float, float, float]:
    q = np.asarray(quat, dtype=float)
    norm = float(np.linalg.norm(q))
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError(f"Invalid quaternion: {list(quat)!r}")
    q = q / norm
    # Canonical hemisphere keeps equal rotations bit-identical.
    if q[3] < 0.0 or (q[3] == 0.0 and q[np.argmax(np.abs(q[:3]))] < 0.0):
        q = -q
    x, y, z, w = (float(v) for v in q)
    return (x, y, z, w)


@dataclass(frozen=True)
class Pose:
    """Position in meters plus a unit quaternion in scalar-last (x, y, z, w) order."""

    position: tuple[float, float, float] = (0.0, 0.0, 0.0)
    quat: tuple[float, float, float, float] = IDENTITY_QUAT

    @classmethod
    def create(
        cls, position: Iterable[float], quat: Sequence[float] = IDENTITY_QUAT
    ) -> "Pose":
        return cls(_as_tuple3(position), _normalize_quat(quat))

    @classmethod
    def from_rotation(cls, position: Iterable[float], rotation: Rotation) -> "Pose":
        return cls.create(position, rotation.as_quat())

    @property
    def p(self) -> Vector:
        return np.array(self.position, dtype=float)

    @property
    def rotation(self) -> Rotation:
        return Rotation.from_quat(self.quat)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: express ``other`` (given in this frame) in the parent frame."""
        rot = self.rotation
        return Pose.from_rotation(self.p + rot.apply(other.p), rot * other.rotation)

    def inverse(self) -> "Pose":
        inv = self.rotation.inv()
        return Pose.from_rotation(-inv.apply(self.p), inv)

    def transform(self, points: Vector) -> Vector:
        """Map body-frame points (N×3) into the parent frame."""
        if len(points) == 0:
            return np.zeros((0, 3))
        return self.rotation.apply(points) + self.p

    def with_position(self, position: Iterable[float]) -> "Pose":
        return Pose(_as_tuple3(position), self.quat)

    def rotated(self, rotation: Rotation) -> "Pose":
        """Rotate the orientation in the world frame about this pose's own origin."""
        return Pose.from_rotation(self.p, rotation * self.rotation)

    def to_dict(self) -> dict[str, list[float]]:
        return {"position": list(self.position), "quat": list(self.quat)}


def rotation_angle(a: Pose, b: Pose) -> float:
    """Geodesic angle (rad) between the orientations of two poses."""
    return float((a.rotation.inv() * b.rotation).magnitude())


def interpolate(a: Pose, b: Pose, fraction: float) -> Pose:
    """Linear position and shortest-arc orientation interpolation."""
    fraction = min(max(fraction, 0.0), 1.0)
    position = a.p + (b.p - a.p) * fraction
    if rotation_angle(a, b) == 0.0:
        return Pose(_as_tuple3(position), a.quat)
    slerp = Slerp([0.0, 1.0], Rotation.from_quat([a.quat, b.quat]))
    return Pose.from_rotation(position, slerp([fraction])[0])


def steps_between(a: Pose, b: Pose, max_translation: float, max_rotation: float) -> int:
    """Control steps needed to move ``a`` to ``b`` under per-step velocity limits."""
    distance = float(np.linalg.norm(b.p - a.p))
    angle = rotation_angle(a, b)
    # Guard against float noise turning an exact multiple into one extra step.
    n_t = math.ceil(distance / max_translation - 1e-9) if distance > 0 else 0
    n_r = math.ceil(angle / max_rotation - 1e-9) if angle > 0 else 0
    return max(n_t, n_r, 0)


def straight_line(
    start: Pose, goal: Pose, count: int, max_translation: float, max_rotation: float
) -> list[Pose]:
    """Time-optimal straight-line waypoints from ``start`` toward ``goal``.

    Returns ``count + 1`` poses beginning with ``start``. Each step covers the largest
    fraction of the remaining motion allowed by the limits; once the goal is reached the
    sequence holds it.
    """
    total = steps_between(start, goal, max_translation, max_rotation)
    poses = [start]
    for h in range(1, count + 1):
        if total == 0 or h >= total:
            poses.append(goal)
        else:
            poses.append(interpolate(start, goal, h / total))
    return poses


def box_distance(point: Vector, low: Vector, high: Vector) -> float:
    """Euclidean distance from ``point`` to an axis-aligned box (0 inside)."""
    excess = np.maximum(low - point, 0.0) + np.maximum(point - high, 0.0)
    return float(np.linalg.norm(excess))


def box_distance_gradient(point: Vector, low: Vector, high: Vector) -> Vector:
    """Gradient of the squared box distance with respect to ``point``."""
    return 2.0 * (np.maximum(point - high, 0.0) - np.maximum(low - point, 0.0))


def alignment_rotation(source: Vector, target: Vector) -> Rotation:
    """Shortest-arc rotation taking direction ``source`` onto ``target``."""
    s = source / np.linalg.norm(source)
    t = target / np.linalg.norm(target)
    axis = np.cross(s, t)
    sin = float(np.linalg.norm(axis))
    cos = float(np.clip(np.dot(s, t), -1.0, 1.0))
    if sin < 1e-12:
        if cos > 0.0:
            return Rotation.identity()
        # Antiparallel: any perpendicular axis works; pick one deterministically.
        helper = np.array([1.0, 0.0, 0.0]) if abs(s[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        axis = np.cross(s, helper)
        return Rotation.from_rotvec(axis / np.linalg.norm(axis) * math.pi)
    return Rotation.from_rotvec(axis / sin * math.atan2(sin, cos))


def tilt_from_vertical(axis: Vector) -> float:
    """Angle (rad) between a body axis and world up, in [0, pi]."""
    axis = axis / np.linalg.norm(axis)
    return float(math.acos(float(np.clip(np.dot(axis, UP), -1.0, 1.0))))
