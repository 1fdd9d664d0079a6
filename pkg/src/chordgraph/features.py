# src/chordgraph/features.py
"""Simulated perception oracle and geometric feature extraction.

``perceive`` samples the world's ground truth with noise and dropout; ``extract_features``
turns the perception output plus the robot state into the named feature vector consumed
by every constraint and failure detector.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
import re
from typing import TYPE_CHECKING, Iterable, Mapping, Union

import numpy as np
from scipy.spatial.transform import Rotation

from chordgraph.config import NoiseConfig
from chordgraph.exceptions import (
    DegenerateCloudError,
    MissingFeatureError,
    UnknownFeatureKeyError,
)
from chordgraph.geometry import GRAVITY_DIR, UP, Pose, Vector

if TYPE_CHECKING:
    from chordgraph.simworld import WorldState

logger = logging.getLogger(__name__)

FeatureValue = Union[float, Vector]

GRIPPER_PREFIX = "gripper:"

# family -> argument kinds; "entity" accepts an object id or "gripper:<arm>"
FEATURE_FAMILIES: dict[str, tuple[str, ...]] = {
    "centroid": ("object",),
    "principal_axis": ("object",),
    "top_point": ("object",),
    "bottom_point": ("object",),
    "fractional_point": ("object", "alpha"),
    "point_count": ("object",),
    "extent": ("object",),
    "upright_axis": ("object",),
    "gripper_width": ("arm",),
    "gripper_origin": ("arm",),
    "gripper_closed": ("arm",),
    "gripper_axis": ("arm",),
    "relative_distance": ("entity", "entity"),
    "lateral_offset": ("entity", "entity"),
    "height_difference": ("entity", "entity"),
    "gravity_dir": (),
}

ARMS = ("left", "right")

_KEY_RE = re.compile(r"^\s*([a-z_]+)\s*(?:\((.*)\))?\s*$")


@dataclass(frozen=True)
class FeatureKey:
    """A parsed feature key such as ``fractional_point(bottle,0.25)``."""

    family: str
    args: tuple[str, ...] = ()

    def __str__(self) -> str:
        if not FEATURE_FAMILIES.get(self.family):
            return self.family
        return f"{self.family}({','.join(self.args)})"

    @property
    def objects(self) -> tuple[str, ...]:
        """Object ids this key reads from the perception output."""
        kinds = FEATURE_FAMILIES[self.family]
        return tuple(
            arg
            for arg, kind in zip(self.args, kinds)
            if kind == "object" or (kind == "entity" and not arg.startswith(GRIPPER_PREFIX))
        )


def parse_feature_key(text: str | FeatureKey) -> FeatureKey:
    """Parse and validate a feature key.

    Raises:
        UnknownFeatureKeyError: unknown family, wrong arity or malformed argument.
    """
    if isinstance(text, FeatureKey):
        return text
    match = _KEY_RE.match(text)
    if not match:
        raise UnknownFeatureKeyError(f"Malformed feature key: {text!r}")
    family, raw_args = match.group(1), match.group(2)
    if family not in FEATURE_FAMILIES:
        raise UnknownFeatureKeyError(f"Unknown feature family {family!r} in {text!r}")
    args = tuple(a.strip() for a in raw_args.split(",")) if raw_args else ()
    kinds = FEATURE_FAMILIES[family]
    if len(args) != len(kinds):
        raise UnknownFeatureKeyError(
            f"Feature {family!r} expects {len(kinds)} argument(s), got {len(args)} in {text!r}"
        )
    for arg, kind in zip(args, kinds):
        if not arg:
            raise UnknownFeatureKeyError(f"Empty argument in {text!r}")
        if kind == "arm" and arg not in ARMS:
            raise UnknownFeatureKeyError(f"Unknown arm {arg!r} in {text!r}")
        if kind == "entity" and arg.startswith(GRIPPER_PREFIX):
            if arg[len(GRIPPER_PREFIX) :] not in ARMS:
                raise UnknownFeatureKeyError(f"Unknown gripper entity {arg!r} in {text!r}")
        if kind == "alpha":
            try:
                alpha = float(arg)
            except ValueError as exc:
                raise UnknownFeatureKeyError(f"Alpha must be numeric in {text!r}") from exc
            if not 0.0 <= alpha <= 1.0:
                raise UnknownFeatureKeyError(f"Alpha must lie in [0, 1] in {text!r}")
    return FeatureKey(family, args)


@dataclass(frozen=True, eq=False)
class PointCloud:
    object_id: str
    points: Vector

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True, eq=False)
class ObjectObservation:
    cloud: PointCloud
    centroid: Vector | None
    point_count: int
    upright: Vector | None = None


@dataclass(frozen=True, eq=False)
class PerceptionOutput:
    """Per-object observations at control step ``step``."""

    step: int
    objects: Mapping[str, ObjectObservation]


@dataclass(frozen=True)
class GripperReading:
    pose: Pose
    width: float
    closed: bool


@dataclass(frozen=True)
class RobotState:
    """Measurable robot state: end-effector poses and gripper readings per arm."""

    grippers: Mapping[str, GripperReading]

    @property
    def q(self) -> Vector:
        """Free-flyer configuration: position and quaternion of each arm, sorted by arm."""
        parts = [
            np.concatenate([self.grippers[arm].pose.p, self.grippers[arm].pose.quat])
            for arm in sorted(self.grippers)
        ]
        return np.concatenate(parts) if parts else np.zeros(0)


@dataclass(frozen=True, eq=False)
class FeatureVector:
    values: Mapping[str, FeatureValue] = field(default_factory=dict)
    missing: frozenset[str] = frozenset()

    def __getitem__(self, key: str | FeatureKey) -> FeatureValue:
        name = str(parse_feature_key(key)) if not isinstance(key, str) else key
        if name in self.values:
            return self.values[name]
        canonical = str(parse_feature_key(name))
        if canonical in self.values:
            return self.values[canonical]
        raise MissingFeatureError(canonical)

    def __contains__(self, key: object) -> bool:
        if not isinstance(key, (str, FeatureKey)):
            return False
        return str(parse_feature_key(key)) in self.values

    def is_missing(self, key: str | FeatureKey) -> bool:
        return str(parse_feature_key(key)) in self.missing


def perceive(world: "WorldState", noise: NoiseConfig, rng: np.random.Generator) -> PerceptionOutput:
    """Sample every object's shape through its true pose with noise and dropout."""
    observations: dict[str, ObjectObservation] = {}
    for object_id in sorted(world.objects):
        obj = world.objects[object_id]
        points = obj.pose.transform(obj.shape_points)
        if noise.sigma > 0.0 and len(points):
            points = points + rng.normal(0.0, noise.sigma, size=points.shape)
        if noise.dropout > 0.0 and len(points):
            points = points[rng.random(len(points)) >= noise.dropout]
        rotation = obj.pose.rotation
        if noise.orientation_sigma > 0.0:
            rotation = Rotation.from_rotvec(rng.normal(0.0, noise.orientation_sigma, 3)) * rotation
        visible = len(points) > 0
        observations[object_id] = ObjectObservation(
            cloud=PointCloud(object_id, points),
            centroid=points.mean(axis=0) if visible else None,
            point_count=len(points),
            upright=rotation.apply(obj.upright_axis) if visible else None,
        )
    return PerceptionOutput(step=world.step, objects=observations)


def principal_axis(cloud: PointCloud | Vector) -> Vector:
    """Unit direction of largest variance, sign-canonicalized.

    Raises:
        DegenerateCloudError: fewer than three points or no spread at all.
    """
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(points) < 3:
        raise DegenerateCloudError(f"Need at least 3 points, got {len(points)}")
    centered = points - points.mean(axis=0)
    covariance = centered.T @ centered / len(points)
    eigenvalues, eigenvectors = np.linalg.eigh(covariance)
    if eigenvalues[-1] <= 1e-9 * max(1.0, float(np.trace(covariance))):
        raise DegenerateCloudError("Point cloud has no spread")
    axis = eigenvectors[:, -1]
    axis = axis / np.linalg.norm(axis)
    if axis[int(np.argmax(np.abs(axis)))] < 0.0:
        axis = -axis
    return axis


def fractional_point(cloud: PointCloud | Vector, axis: Vector, alpha: float) -> Vector:
    """Point at fraction ``alpha`` of the cloud's extent along ``axis``, on the centroid line."""
    points = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=float)
    if len(points) == 0:
        raise DegenerateCloudError("Cannot take a fractional point of an empty cloud")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    projections = points @ axis
    low, high = float(projections.min()), float(projections.max())
    target = low + alpha * (high - low)
    centroid = points.mean(axis=0)
    return centroid + (target - float(centroid @ axis)) * axis


class _Extractor:
    """Per-call cache so each object's axis is computed once."""

    def __init__(self, perception: PerceptionOutput, robot: RobotState):
        self._perception = perception
        self._robot = robot
        self._axes: dict[str, Vector] = {}

    def _observation(self, object_id: str) -> ObjectObservation | None:
        obs = self._perception.objects.get(object_id)
        if obs is None or obs.point_count == 0:
            return None
        return obs

    def _axis(self, object_id: str, obs: ObjectObservation) -> Vector:
        if object_id not in self._axes:
            self._axes[object_id] = principal_axis(obs.cloud)
        return self._axes[object_id]

    def _position(self, entity: str) -> Vector | None:
        if entity.startswith(GRIPPER_PREFIX):
            reading = self._robot.grippers.get(entity[len(GRIPPER_PREFIX) :])
            return None if reading is None else reading.pose.p
        obs = self._observation(entity)
        return None if obs is None else obs.centroid

    def compute(self, key: FeatureKey) -> FeatureValue | None:
        family, args = key.family, key.args
        if family == "gravity_dir":
            return GRAVITY_DIR.copy()
        if family.startswith("gripper_"):
            reading = self._robot.grippers.get(args[0])
            if reading is None:
                return None
            if family == "gripper_width":
                return float(reading.width)
            if family == "gripper_closed":
                return 1.0 if reading.closed else 0.0
            if family == "gripper_origin":
                return reading.pose.p
            return reading.pose.rotation.apply(np.array([0.0, 0.0, 1.0]))
        if family in ("relative_distance", "lateral_offset", "height_difference"):
            a, b = self._position(args[0]), self._position(args[1])
            if a is None or b is None:
                return None
            delta = a - b
            if family == "relative_distance":
                return float(np.linalg.norm(delta))
            if family == "lateral_offset":
                return float(math.hypot(delta[0], delta[1]))
            return float(delta[2])
        if family == "point_count":
            obs = self._perception.objects.get(args[0])
            return 0.0 if obs is None else float(obs.point_count)
        obs = self._observation(args[0])
        if obs is None:
            return None
        if family == "centroid":
            return obs.centroid
        if family == "upright_axis":
            return obs.upright
        if family == "top_point":
            return fractional_point(obs.cloud, UP, 1.0)
        if family == "bottom_point":
            return fractional_point(obs.cloud, UP, 0.0)
        try:
            axis = self._axis(args[0], obs)
        except DegenerateCloudError:
            return None
        if family == "principal_axis":
            return axis
        projections = obs.cloud.points @ axis
        if family == "extent":
            return float(projections.max() - projections.min())
        return fractional_point(obs.cloud, axis, float(args[1]))


def extract_features(
    perception: PerceptionOutput,
    robot: RobotState,
    requested: Iterable[str | FeatureKey],
) -> FeatureVector:
    """Compute exactly the requested keys; keys that cannot be computed are flagged missing.

    Raises:
        UnknownFeatureKeyError: a requested key is malformed.
    """
    keys = sorted({parse_feature_key(k) for k in requested}, key=str)
    extractor = _Extractor(perception, robot)
    values: dict[str, FeatureValue] = {}
    missing: set[str] = set()
    for key in keys:
        value = extractor.compute(key)
        if value is None:
            missing.add(str(key))
            continue
        if isinstance(value, np.ndarray):
            value = value.astype(float, copy=True)
            value.setflags(write=False)
        values[str(key)] = value
    if missing:
        logger.debug("Step %d: features missing %s", perception.step, sorted(missing))
    return FeatureVector(values=values, missing=frozenset(missing))
