# src/chordgraph/solvers.py
"""Keyframe synthesis and receding-horizon path refinement.

The robot is modelled as one free-flying end effector per arm, confined to an
axis-aligned workspace box with per-step velocity limits. Hard constraints are enforced
by a penalty whose weight grows along ``SolverConfig.penalty_schedule``; every returned
solution is re-verified against its constraints before it is handed out.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache
import json
import logging
import math
from typing import Any, Callable, Iterable, Mapping, Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.optimize import minimize

from chordgraph.config import SolverConfig
from chordgraph.detectors import eval_detector, required_keys
from chordgraph.exceptions import InfeasibleError, MissingFeatureError
from chordgraph.features import (
    ARMS,
    FEATURE_FAMILIES,
    GRIPPER_PREFIX,
    FeatureVector,
    GripperReading,
    ObjectObservation,
    PerceptionOutput,
    PointCloud,
    RobotState,
    extract_features,
    parse_feature_key,
)
from chordgraph.geometry import (
    UP,
    Pose,
    Vector,
    box_distance,
    box_distance_gradient,
    interpolate,
    rotation_angle,
    straight_line,
)
from chordgraph.schema import SceneDoc
from chordgraph.utils import canonical_json

logger = logging.getLogger(__name__)

_FD_STEP = 1e-6
_DENSE_SAMPLES = 10


# ---------------------------------------------------------------------------
# Workspace and collision field
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class WorkspaceModel:
    """Per-arm reachable boxes, velocity limits and home poses."""

    boxes: Mapping[str, tuple[tuple[float, float, float], tuple[float, float, float]]]
    max_translation: float = 0.02
    max_rotation: float = 0.1
    homes: Mapping[str, Pose] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.max_translation <= 0.0 or self.max_rotation <= 0.0:
            raise ValueError("velocity limits must be positive")
        for arm, (low, high) in self.boxes.items():
            if any(lo >= hi for lo, hi in zip(low, high)):
                raise ValueError(f"workspace box of {arm!r} is empty")

    @classmethod
    def from_scene(cls, scene: SceneDoc, config: SolverConfig | None = None) -> "WorkspaceModel":
        config = config or SolverConfig()
        return cls(
            boxes={arm: (ws.low, ws.high) for arm, ws in scene.workspace.items()},
            max_translation=config.max_translation,
            max_rotation=config.max_rotation,
            homes={
                arm: Pose.create(ws.home.position, ws.home.quat)
                for arm, ws in scene.workspace.items()
            },
        )

    def bounds(self, arm: str) -> tuple[Vector, Vector]:
        low, high = self.boxes[arm]
        return np.asarray(low, dtype=float), np.asarray(high, dtype=float)

    def clip(self, arm: str, position: Iterable[float]) -> Vector:
        low, high = self.bounds(arm)
        return np.clip(np.asarray(list(position), dtype=float), low, high)

    def contains(self, arm: str, position: Iterable[float], tol: float = 1e-9) -> bool:
        low, high = self.bounds(arm)
        return box_distance(np.asarray(list(position), dtype=float), low, high) <= tol


def reachability_residual(pose: Pose | Vector, ws: WorkspaceModel, arm: str = "right") -> float:
    """0 inside the arm's box, Euclidean distance to the box otherwise."""
    point = pose.p if isinstance(pose, Pose) else np.asarray(pose, dtype=float)
    low, high = ws.bounds(arm)
    return box_distance(point, low, high)


@dataclass(frozen=True, eq=False)
class CollisionField:
    """Voxel grid of signed distance to the static scene (table plane plus box obstacles)."""

    origin: Vector
    voxel: float
    margin: float
    values: Vector

    def __post_init__(self) -> None:
        if self.margin < 0.0:
            raise ValueError("safety margin must be >= 0")

    @property
    def axes(self) -> tuple[Vector, Vector, Vector]:
        nx_, ny_, nz_ = self.values.shape
        return (
            self.origin[0] + self.voxel * np.arange(nx_),
            self.origin[1] + self.voxel * np.arange(ny_),
            self.origin[2] + self.voxel * np.arange(nz_),
        )

    @property
    def upper(self) -> Vector:
        return self.origin + self.voxel * (np.asarray(self.values.shape) - 1)

    def _interpolator(self) -> RegularGridInterpolator:
        cached = self.__dict__.get("_rgi")
        if cached is None:
            cached = RegularGridInterpolator(self.axes, self.values, method="linear")
            object.__setattr__(self, "_rgi", cached)
        return cached

    def query(self, points: Vector) -> tuple[Vector, Vector]:
        """Interpolated distances for (N, 3) points plus a mask of clamped queries."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        clamped_pts = np.clip(pts, self.origin, self.upper)
        clamped = np.any(np.abs(clamped_pts - pts) > 0.0, axis=1)
        return self._interpolator()(clamped_pts), clamped

    def gradient(self, points: Vector) -> Vector:
        """Central finite-difference gradient of the interpolated field."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        h = 0.5 * self.voxel
        grads = np.zeros_like(pts)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            plus, _ = self.query(pts + offset)
            minus, _ = self.query(pts - offset)
            grads[:, axis] = (plus - minus) / (2.0 * h)
        return grads


def sdf_query(field_: CollisionField, point: Iterable[float]) -> float:
    """Signed distance at ``point``; points outside the grid are clamped with a warning."""
    values, clamped = field_.query(np.asarray(list(point), dtype=float))
    if clamped[0]:
        logger.warning("SDF query %s outside the grid; clamped", list(point))
    return float(values[0])


def _box_sdf(points: Vector, center: Vector, half: Vector) -> Vector:
    q = np.abs(points - center) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
    inside = np.minimum(np.max(q, axis=-1), 0.0)
    return outside + inside


@lru_cache(maxsize=16)
def _build_field(key: str) -> CollisionField:
    spec = json.loads(key)
    voxel = float(spec["voxel"])
    low = np.asarray(spec["low"], dtype=float)
    high = np.asarray(spec["high"], dtype=float)
    counts = np.ceil((high - low) / voxel).astype(int) + 1
    axes = [low[i] + voxel * np.arange(counts[i]) for i in range(3)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = grid[..., 2] - float(spec["z_table"])
    for obstacle in spec["obstacles"]:
        center = np.asarray(obstacle["center"], dtype=float)
        half = 0.5 * np.asarray(obstacle["size"], dtype=float)
        values = np.minimum(values, _box_sdf(grid, center, half))
    logger.debug("Built collision field %s voxels", tuple(int(c) for c in counts))
    return CollisionField(origin=low, voxel=voxel, margin=float(spec["margin"]), values=values)


def build_collision_field(scene: SceneDoc, config: SolverConfig | None = None) -> CollisionField:
    """Grid covering every workspace box plus a margin; built once per scene and process."""
    config = config or SolverConfig()
    pad = config.safety_margin + 2.0 * config.voxel
    lows = np.array([ws.low for ws in scene.workspace.values()], dtype=float)
    highs = np.array([ws.high for ws in scene.workspace.values()], dtype=float)
    key = canonical_json(
        {
            "voxel": config.voxel,
            "margin": config.safety_margin,
            "low": (lows.min(axis=0) - pad).tolist(),
            "high": (highs.max(axis=0) + pad).tolist(),
            "z_table": scene.z_table,
            "obstacles": [o.model_dump(mode="json") for o in scene.obstacles],
        }
    )
    return _build_field(key)


# ---------------------------------------------------------------------------
# Hypothetical features
# ---------------------------------------------------------------------------


def constraint_arms(constraints: Iterable[Any]) -> tuple[str, ...]:
    """Arms whose end-effector pose or gripper state a constraint set reads."""
    arms: set[str] = set()
    for key in required_keys(list(constraints)):
        parsed = parse_feature_key(key)
        for kind, arg in zip(FEATURE_FAMILIES[parsed.family], parsed.args):
            if kind == "arm":
                arms.add(arg)
            elif kind == "entity" and arg.startswith(GRIPPER_PREFIX):
                arms.add(arg[len(GRIPPER_PREFIX) :])
    return tuple(a for a in ARMS if a in arms)


@dataclass(frozen=True, eq=False)
class SceneEstimate:
    """What the solvers see: perception, robot state, and which arm carries which object."""

    perception: PerceptionOutput
    robot: RobotState
    carried: Mapping[str, str] = field(default_factory=dict)


def hypothetical_features(
    estimate: SceneEstimate,
    positions: Mapping[str, Vector],
    keys: Iterable[str],
    gripper_intent: Mapping[str, Any] | None = None,
) -> FeatureVector:
    """Features with the given arms moved to ``positions``.

    A carried object is grasped at its centroid, so its cloud is translated onto the
    new gripper origin. ``gripper_intent`` overrides the open/closed reading of every
    arm it names, moved or not.
    """
    intent = gripper_intent or {}
    objects = dict(estimate.perception.objects)
    grippers = dict(estimate.robot.grippers)
    for arm in sorted(set(positions) | set(intent)):
        if arm not in grippers:
            continue
        reading = grippers[arm]
        closed, width = reading.closed, reading.width
        if arm in intent:
            closed = bool(intent[arm].closed)
            width = (reading.width if reading.closed else 0.0) if closed else intent[arm].width
        pose = reading.pose
        if arm in positions:
            pose = pose.with_position(positions[arm])
        grippers[arm] = GripperReading(pose=pose, width=width, closed=closed)
        if arm not in positions:
            continue
        position = positions[arm]
        carried = estimate.carried.get(arm)
        obs = objects.get(carried) if carried else None
        if obs is not None and obs.centroid is not None:
            shift = np.asarray(position, dtype=float) - obs.centroid
            objects[carried] = ObjectObservation(  # type: ignore[index]
                cloud=PointCloud(obs.cloud.object_id, obs.cloud.points + shift),
                centroid=obs.centroid + shift,
                point_count=obs.point_count,
                upright=obs.upright,
            )
    perception = PerceptionOutput(step=estimate.perception.step, objects=objects)
    return extract_features(perception, RobotState(grippers=grippers), keys)


def _constraint_values(constraints: Sequence[Any], z: FeatureVector) -> Vector:
    values = np.empty(len(constraints))
    for i, constraint in enumerate(constraints):
        try:
            values[i] = eval_detector(constraint, z)
        except MissingFeatureError:
            values[i] = math.inf
    return values


def _hinge_sq(values: Vector) -> float:
    finite = np.where(np.isfinite(values), values, 1e3)
    return float(np.sum(np.maximum(finite, 0.0) ** 2))


def _fd_gradient(fn: Callable[[Vector], float], x: Vector, h: float = _FD_STEP) -> Vector:
    grad = np.zeros_like(x)
    for i in range(len(x)):
        step = np.zeros_like(x)
        step[i] = h
        grad[i] = (fn(x + step) - fn(x - step)) / (2.0 * h)
    return grad


def _collision_terms(field_: CollisionField, points: Vector) -> tuple[float, Vector]:
    """Squared-hinge collision cost ``sum(max(0, margin - sdf)^2)`` and its gradient."""
    values, _ = field_.query(points)
    hinge = np.maximum(field_.margin - values, 0.0)
    if not np.any(hinge > 0.0):
        return 0.0, np.zeros_like(np.atleast_2d(points))
    grads = field_.gradient(points)
    return float(np.sum(hinge**2)), -2.0 * hinge[:, None] * grads


# ---------------------------------------------------------------------------
# Sub-goal keyframes
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class SubgoalProblem:
    """Keyframe synthesis for one node: which arms move, and what must hold there."""

    constraints: tuple[Any, ...]
    estimate: SceneEstimate
    workspace: WorkspaceModel
    field: CollisionField
    config: SolverConfig = SolverConfig()
    arms: tuple[str, ...] = ()
    reference: Mapping[str, Pose] = field(default_factory=dict)
    previous: Mapping[str, Pose] | None = None
    gripper_intent: Mapping[str, Any] = field(default_factory=dict)
    node: str = ""

    def __post_init__(self) -> None:
        if not self.arms:
            object.__setattr__(self, "arms", constraint_arms(self.constraints) or ("right",))

    @classmethod
    def for_node(
        cls,
        node: Any,
        estimate: SceneEstimate,
        workspace: WorkspaceModel,
        field_: CollisionField,
        config: SolverConfig | None = None,
        previous: Mapping[str, Pose] | None = None,
        arms: Sequence[str] | None = None,
    ) -> "SubgoalProblem":
        constraints = tuple(node.sub_goals)
        chosen = tuple(arms) if arms else constraint_arms(constraints) or ("right",)
        reference = {arm: estimate.robot.grippers[arm].pose for arm in chosen}
        return cls(
            constraints=constraints,
            estimate=estimate,
            workspace=workspace,
            field=field_,
            config=config or SolverConfig(),
            arms=chosen,
            reference=reference,
            previous=previous,
            gripper_intent=dict(node.gripper_intent),
            node=node.id,
        )

    def reference_pose(self, arm: str) -> Pose:
        if arm in self.reference:
            return self.reference[arm]
        return self.estimate.robot.grippers[arm].pose

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(sorted(required_keys(list(self.constraints))))

    def split(self, x: Vector) -> dict[str, Vector]:
        return {arm: x[3 * i : 3 * i + 3] for i, arm in enumerate(self.arms)}

    def constraint_values(self, x: Vector) -> Vector:
        if not self.constraints:
            return np.zeros(0)
        z = hypothetical_features(self.estimate, self.split(x), self.keys, self.gripper_intent)
        return _constraint_values(self.constraints, z)


def subgoal_objective(problem: SubgoalProblem, x: Vector, mu: float = 0.0) -> float:
    return _subgoal_terms(problem, x, mu, with_gradient=False)[0]


def subgoal_gradient(problem: SubgoalProblem, x: Vector, mu: float = 0.0) -> Vector:
    return _subgoal_terms(problem, x, mu, with_gradient=True)[1]


def _subgoal_terms(
    problem: SubgoalProblem, x: Vector, mu: float, *, with_gradient: bool = True
) -> tuple[float, Vector]:
    w = problem.config.weights
    positions = problem.split(x)
    value = 0.0
    grad = np.zeros_like(x)
    points = np.array([positions[a] for a in problem.arms])

    collision, collision_grad = _collision_terms(problem.field, points)
    value += w.collision * collision
    grad += w.collision * collision_grad.reshape(-1)

    for i, arm in enumerate(problem.arms):
        p = positions[arm]
        low, high = problem.workspace.bounds(arm)
        value += w.reachability * box_distance(p, low, high) ** 2
        grad[3 * i : 3 * i + 3] += w.reachability * box_distance_gradient(p, low, high)
        ref = problem.reference_pose(arm).p
        value += w.regularization * float(np.sum((p - ref) ** 2))
        grad[3 * i : 3 * i + 3] += 2.0 * w.regularization * (p - ref)
        if problem.previous and arm in problem.previous:
            prev = problem.previous[arm].p
            value += w.consistency * float(np.sum((p - prev) ** 2))
            grad[3 * i : 3 * i + 3] += 2.0 * w.consistency * (p - prev)

    if len(problem.arms) == 2:
        low_b, high_b = problem.config.wrist_bounds
        delta = positions[problem.arms[0]] - positions[problem.arms[1]]
        d = float(np.linalg.norm(delta))
        excess = max(0.0, low_b - d) - max(0.0, d - high_b)
        # excess > 0: too close, < 0: too far
        value += w.bimanual * excess**2
        if excess != 0.0 and d > 0.0:
            g = -2.0 * w.bimanual * excess * delta / d
            grad[0:3] += g
            grad[3:6] -= g

    if mu > 0.0 and problem.constraints:

        def penalty(y: Vector) -> float:
            return mu * _hinge_sq(problem.constraint_values(y))

        value += penalty(x)
        if with_gradient:
            grad += _fd_gradient(penalty, x)
    return value, grad


def _subgoal_feasible(problem: SubgoalProblem, x: Vector) -> bool:
    tol = problem.config.tol
    if not all(problem.workspace.contains(a, p) for a, p in problem.split(x).items()):
        return False
    return bool(np.all(problem.constraint_values(x) <= tol))


def solve_subgoal(
    problem: SubgoalProblem, rng: np.random.Generator | None = None
) -> dict[str, Pose]:
    """Synthesize a keyframe pose for every arm of ``problem``.

    Global stage: the reference plus ``restarts`` uniform samples in the workspace boxes,
    ranked by the penalized objective. Local stage: bounded L-BFGS-B over the penalty
    schedule for the best ``refine`` candidates.

    Raises:
        InfeasibleError: no candidate satisfies every constraint within ``tol``.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    config = problem.config
    lows, highs = zip(*(problem.workspace.bounds(a) for a in problem.arms))
    low = np.concatenate(lows)
    high = np.concatenate(highs)
    bounds = list(zip(low.tolist(), high.tolist()))

    reference = np.concatenate([problem.reference_pose(a).p for a in problem.arms])
    candidates = [np.clip(reference, low, high)]
    candidates.extend(rng.uniform(low, high) for _ in range(config.restarts))
    mu0 = config.penalty_schedule[0]
    scored = sorted(
        ((subgoal_objective(problem, c, mu0), i) for i, c in enumerate(candidates)),
        key=lambda item: (item[0], item[1]),
    )

    best: tuple[float, Vector] | None = None
    for _, index in scored[: config.refine]:
        x = candidates[index]
        for mu in config.penalty_schedule:
            result = minimize(
                lambda y, m=mu: _subgoal_terms(problem, y, m),
                x,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": config.max_iterations},
            )
            x = np.clip(result.x, low, high)
            if _subgoal_feasible(problem, x):
                break
        if not _subgoal_feasible(problem, x):
            continue
        cost = subgoal_objective(problem, x)
        if best is None or cost < best[0]:
            best = (cost, x)

    if best is None:
        raise InfeasibleError(
            f"No keyframe satisfies the sub-goal of {problem.node or 'node'!r}", problem=problem
        )
    positions = problem.split(best[1])
    keyframe = {
        arm: problem.reference_pose(arm).with_position(positions[arm]) for arm in problem.arms
    }
    logger.debug("Keyframe for %r: %s", problem.node, {a: p.position for a, p in keyframe.items()})
    return keyframe


# ---------------------------------------------------------------------------
# Receding-horizon paths
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PathProblem:
    """Motion of one arm from ``start`` toward the keyframe ``goal``."""

    arm: str
    start: Pose
    goal: Pose
    estimate: SceneEstimate
    workspace: WorkspaceModel
    field: CollisionField
    constraints: tuple[Any, ...] = ()
    config: SolverConfig = SolverConfig()
    horizon: int | None = None
    execute: int | None = None

    def __post_init__(self) -> None:
        h = self.horizon if self.horizon is not None else self.config.horizon
        m = self.execute if self.execute is not None else self.config.execute
        if not h >= m >= 1:
            raise ValueError(f"need horizon >= execute >= 1, got H={h}, M={m}")
        object.__setattr__(self, "horizon", h)
        object.__setattr__(self, "execute", m)

    @property
    def keys(self) -> tuple[str, ...]:
        return tuple(sorted(required_keys(list(self.constraints))))

    def waypoint_values(self, position: Vector) -> Vector:
        if not self.constraints:
            return np.zeros(0)
        z = hypothetical_features(self.estimate, {self.arm: position}, self.keys)
        return _constraint_values(self.constraints, z)


def smoothness_cost(poses: Sequence[Pose]) -> float:
    """Sum of squared step lengths, translation plus rotation; zero iff constant."""
    total = 0.0
    for a, b in zip(poses, poses[1:]):
        total += float(np.sum((b.p - a.p) ** 2)) + rotation_angle(a, b) ** 2
    return total


def path_objective(problem: PathProblem, flat: Vector, mu: float = 0.0) -> float:
    return _path_terms(problem, flat, mu, with_gradient=False)[0]


def path_gradient(problem: PathProblem, flat: Vector, mu: float = 0.0) -> Vector:
    return _path_terms(problem, flat, mu, with_gradient=True)[1]


def _path_terms(
    problem: PathProblem, flat: Vector, mu: float, *, with_gradient: bool = True
) -> tuple[float, Vector]:
    w = problem.config.weights
    limit_sq = problem.workspace.max_translation**2
    points = flat.reshape(-1, 3)
    full = np.vstack([problem.start.p, points])
    grad = np.zeros_like(points)
    goal = problem.goal.p

    value = w.progress * float(np.sum((points[-1] - goal) ** 2))
    grad[-1] += 2.0 * w.progress * (points[-1] - goal)

    steps = np.diff(full, axis=0)
    value += w.smoothness * float(np.sum(steps**2))
    step_grad = 2.0 * w.smoothness * steps
    grad += step_grad
    grad[:-1] -= step_grad[1:]

    collision, collision_grad = _collision_terms(problem.field, points)
    value += w.collision * collision
    grad += w.collision * collision_grad

    low, high = problem.workspace.bounds(problem.arm)
    for h, p in enumerate(points):
        value += w.reachability * box_distance(p, low, high) ** 2
        grad[h] += w.reachability * box_distance_gradient(p, low, high)

    if mu > 0.0:
        excess = np.maximum(np.sum(steps**2, axis=1) - limit_sq, 0.0)
        value += mu * float(np.sum(excess**2))
        vel_grad = 4.0 * mu * excess[:, None] * steps
        grad += vel_grad
        grad[:-1] -= vel_grad[1:]

        if problem.constraints:
            for h, p in enumerate(points):

                def penalty(y: Vector) -> float:
                    return mu * _hinge_sq(problem.waypoint_values(y))

                value += penalty(p)
                if with_gradient:
                    grad[h] += _fd_gradient(penalty, p)
    return value, grad.reshape(-1)


def _resample(polyline: Sequence[Vector], count: int, max_translation: float) -> Vector:
    """``count`` waypoints after the first vertex, advancing at most the limit per step."""
    vertices = np.asarray(polyline, dtype=float)
    lengths = np.linalg.norm(np.diff(vertices, axis=0), axis=1)
    total = float(lengths.sum())
    if total == 0.0:
        return np.repeat(vertices[:1], count, axis=0)
    n = max(1, math.ceil(total / max_translation - 1e-9))
    cumulative = np.concatenate([[0.0], np.cumsum(lengths)])
    out = np.empty((count, 3))
    for h in range(1, count + 1):
        s = min(h / n, 1.0) * total
        seg = min(int(np.searchsorted(cumulative, s, side="right")) - 1, len(lengths) - 1)
        frac = 0.0 if lengths[seg] == 0.0 else (s - cumulative[seg]) / lengths[seg]
        out[h - 1] = vertices[seg] + frac * (vertices[seg + 1] - vertices[seg])
    return out


def _via_points(problem: PathProblem, rng: np.random.Generator) -> list[Vector]:
    start, goal = problem.start.p, problem.goal.p
    mid = 0.5 * (start + goal)
    direction = goal - start
    side = np.cross(direction, UP)
    norm = float(np.linalg.norm(side))
    side = side / norm if norm > 1e-9 else np.array([0.0, 1.0, 0.0])
    vias = [mid + dz * UP for dz in (0.05, 0.1, 0.2, 0.3)]
    vias += [mid + s * dy * side for dy in (0.1, 0.2, 0.3) for s in (1.0, -1.0)]
    low, high = problem.workspace.bounds(problem.arm)
    vias += [rng.uniform(low, high) for _ in range(problem.config.restarts)]
    return [problem.workspace.clip(problem.arm, v) for v in vias]


def _project(problem: PathProblem, points: Vector) -> Vector:
    """Clip into the box and enforce the translation limit step by step."""
    limit = problem.workspace.max_translation
    out = np.empty_like(points)
    previous = problem.start.p
    for h, p in enumerate(points):
        p = problem.workspace.clip(problem.arm, p)
        step = p - previous
        length = float(np.linalg.norm(step))
        if length > limit:
            p = previous + step * (limit / length)
        out[h] = p
        previous = p
    return out


def _to_poses(problem: PathProblem, points: Vector) -> list[Pose]:
    start, goal = problem.start, problem.goal
    angle = rotation_angle(start, goal)
    n_rot = math.ceil(angle / problem.workspace.max_rotation - 1e-9) if angle > 0 else 0
    poses = [start]
    for h, p in enumerate(points, start=1):
        fraction = 1.0 if n_rot == 0 or h >= n_rot else h / n_rot
        poses.append(interpolate(start, goal, fraction).with_position(p))
    return poses


def _path_feasible(problem: PathProblem, poses: Sequence[Pose]) -> bool:
    tol = problem.config.tol
    margin = problem.field.margin
    dense = [
        a.p + (b.p - a.p) * t
        for a, b in zip(poses, poses[1:])
        for t in np.linspace(0.0, 1.0, _DENSE_SAMPLES + 1)[1:]
    ]
    if dense:
        values, _ = problem.field.query(np.array(dense))
        if np.any(values < margin - 1e-9):
            return False
    for pose in poses[1:]:
        if not problem.workspace.contains(problem.arm, pose.p):
            return False
        if np.any(problem.waypoint_values(pose.p) > tol):
            return False
    return True


def solve_path(
    problem: PathProblem,
    estimate: SceneEstimate | None = None,
    rng: np.random.Generator | None = None,
) -> list[Pose]:
    """Plan ``horizon + 1`` poses starting at ``problem.start``.

    The analytic straight line is returned when it is already collision-free and
    satisfies every path constraint. Otherwise straight and via-point detours seed a
    penalized L-BFGS-B refinement, and the best verified candidate wins.

    Raises:
        InfeasibleError: the start lies outside the workspace or no candidate verifies.
    """
    if estimate is not None:
        problem = replace(problem, estimate=estimate)
    config = problem.config
    ws = problem.workspace
    horizon = int(problem.horizon or config.horizon)
    if reachability_residual(problem.start, ws, problem.arm) > config.tol:
        raise InfeasibleError(
            f"Path start {problem.start.position} is outside the {problem.arm} workspace",
            problem=problem,
        )

    line = straight_line(problem.start, problem.goal, horizon, ws.max_translation, ws.max_rotation)
    if _path_feasible(problem, line):
        return line

    rng = rng if rng is not None else np.random.default_rng(0)
    start, goal = problem.start.p, problem.goal.p
    seeds = [_resample([start, goal], horizon, ws.max_translation)]
    seeds += [
        _resample([start, via, goal], horizon, ws.max_translation)
        for via in _via_points(problem, rng)
    ]
    mu0 = config.penalty_schedule[0]
    ranked = sorted(
        range(len(seeds)), key=lambda i: (path_objective(problem, seeds[i].reshape(-1), mu0), i)
    )
    low, high = ws.bounds(problem.arm)
    bounds = list(zip(np.tile(low, horizon).tolist(), np.tile(high, horizon).tolist()))

    best: tuple[float, list[Pose]] | None = None

    def consider(points: Vector) -> None:
        nonlocal best
        poses = _to_poses(problem, _project(problem, points))
        if not _path_feasible(problem, poses):
            return
        cost = path_objective(problem, np.array([p.p for p in poses[1:]]).reshape(-1))
        if best is None or cost < best[0]:
            best = (cost, poses)

    for index in ranked[: max(config.refine, 1) * 2]:
        seed = seeds[index]
        consider(seed)
        flat = seed.reshape(-1)
        for mu in config.penalty_schedule:
            result = minimize(
                lambda y, m=mu: _path_terms(problem, y, m),
                flat,
                jac=True,
                method="L-BFGS-B",
                bounds=bounds,
                options={"maxiter": config.max_iterations},
            )
            flat = result.x
        consider(flat.reshape(-1, 3))

    if best is None:
        raise InfeasibleError(
            f"No collision-free path for {problem.arm} toward {problem.goal.position}",
            problem=problem,
        )
    logger.debug("Path for %s refined; cost %.4g", problem.arm, best[0])
    return best[1]
