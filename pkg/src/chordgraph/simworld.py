# src/chordgraph/simworld.py
"""Desk-scale kinematic world: rigid objects, grippers with attachment, disturbances.

Physics is kinematic. Released or disturbed objects are placed by :func:`settle`:
objects tilted past 45 degrees fall over, and every free object rests on the table or
on a support object beneath it.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
import logging
import math
from typing import Any, Iterable, Iterator, Mapping

import numpy as np
from scipy.spatial.transform import Rotation

from chordgraph.actions import SolverTransition
from chordgraph.config import NoiseConfig, SolverConfig
from chordgraph.detectors import eval_detector, required_keys
from chordgraph.exceptions import MissingFeatureError, StepBudgetExceeded, UnknownObjectError
from chordgraph.features import GripperReading, RobotState, extract_features, perceive
from chordgraph.geometry import (
    UP,
    Pose,
    Vector,
    alignment_rotation,
    rotation_angle,
    tilt_from_vertical,
)
from chordgraph.schema import DisturbanceDoc, ObjectDoc, ScheduledEventDoc, SceneDoc
from chordgraph.skills import (
    GRASP_TOLERANCE,
    LYING_ANGLE,
    OPEN_WIDTH,
    SkillContext,
    StepCommand,
    action_commands,
)
from chordgraph.solvers import WorkspaceModel

logger = logging.getLogger(__name__)

DROP_JITTER = 0.03
POUR_ANGLE = math.radians(100.0)
POUR_RADIUS = 0.06

# R2 low-discrepancy sequence constants
_R2_A = 0.7548776662466927
_R2_B = 0.5698402909980532


def sample_shape(shape: str, dims: tuple[float, ...], count: int) -> Vector:
    """Deterministic surface samples of a primitive, centered on their mean."""
    points = np.empty((count, 3))
    for i in range(count):
        u = (0.5 + i * _R2_A) % 1.0
        v = (0.5 + i * _R2_B) % 1.0
        if shape == "cylinder":
            radius, height = dims
            angle = 2.0 * math.pi * u
            kind = i % 4
            if kind < 2:
                r = radius * math.sqrt(v)
                z = -0.5 * height if kind == 0 else 0.5 * height
                points[i] = (r * math.cos(angle), r * math.sin(angle), z)
            else:
                points[i] = (
                    radius * math.cos(angle),
                    radius * math.sin(angle),
                    (v - 0.5) * height,
                )
        else:
            face = i % 6
            axis, sign = face // 2, (1.0 if face % 2 else -1.0)
            others = [a for a in range(3) if a != axis]
            p = np.zeros(3)
            p[axis] = 0.5 * sign * dims[axis]
            p[others[0]] = (u - 0.5) * dims[others[0]]
            p[others[1]] = (v - 0.5) * dims[others[1]]
            points[i] = p
    return points - points.mean(axis=0)


@dataclass
class RigidObject:
    id: str
    shape: str
    dims: tuple[float, ...]
    shape_points: Vector
    pose: Pose
    upright_axis: Vector
    grasp_width: float
    support: bool = False
    attached_to: str | None = None
    grasp_transform: Pose | None = None
    supported_by: str | None = None
    support_transform: Pose | None = None

    @classmethod
    def from_doc(cls, doc: ObjectDoc, count: int) -> "RigidObject":
        axis = np.asarray(doc.upright_axis, dtype=float)
        return cls(
            id=doc.id,
            shape=doc.shape,
            dims=tuple(doc.dims),
            shape_points=sample_shape(doc.shape, tuple(doc.dims), count),
            pose=Pose.create(doc.pose.position, doc.pose.quat),
            upright_axis=axis / np.linalg.norm(axis),
            grasp_width=doc.resolved_grasp_width,
            support=doc.support,
        )

    def world_points(self) -> Vector:
        return self.pose.transform(self.shape_points)

    def world_upright(self) -> Vector:
        return self.pose.rotation.apply(self.upright_axis)

    def tilt(self) -> float:
        return tilt_from_vertical(self.world_upright())

    def is_flat(self) -> bool:
        """Lower along its upright axis than across it; such objects land flat."""
        axis = self.upright_axis
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
        first = np.cross(axis, helper)
        first /= np.linalg.norm(first)
        second = np.cross(axis, first)
        height = float(np.ptp(self.shape_points @ axis))
        across = min(
            float(np.ptp(self.shape_points @ first)), float(np.ptp(self.shape_points @ second))
        )
        return height < across


@dataclass
class Gripper:
    arm: str
    pose: Pose
    width: float = OPEN_WIDTH
    closed: bool = False
    held: str | None = None


@dataclass(frozen=True)
class WorldEvent:
    step: int
    kind: str
    object: str | None = None
    arm: str | None = None
    detail: Mapping[str, Any] = field(default_factory=dict)
    disturbance: bool = False

    @property
    def tag(self) -> str:
        return f"{self.kind}:{self.object}" if self.object else self.kind

    def to_dict(self) -> dict[str, Any]:
        data: dict[str, Any] = {"step": self.step, "kind": self.kind}
        if self.object is not None:
            data["object"] = self.object
        if self.arm is not None:
            data["arm"] = self.arm
        if self.detail:
            data["detail"] = dict(self.detail)
        if self.disturbance:
            data["disturbance"] = True
        return data


@dataclass
class WorldState:
    objects: dict[str, RigidObject]
    grippers: dict[str, Gripper]
    workspace: WorkspaceModel
    z_table: float = 0.0
    step: int = 0
    events: list[WorldEvent] = field(default_factory=list)
    scene: SceneDoc | None = None

    def object(self, object_id: str) -> RigidObject:
        try:
            return self.objects[object_id]
        except KeyError:
            raise UnknownObjectError(f"Unknown object {object_id!r}") from None

    def robot_state(self) -> RobotState:
        return RobotState(
            grippers={
                arm: GripperReading(pose=g.pose, width=g.width, closed=g.closed)
                for arm, g in sorted(self.grippers.items())
            }
        )

    def carried(self) -> dict[str, str]:
        return {arm: g.held for arm, g in sorted(self.grippers.items()) if g.held}

    def copy(self) -> "WorldState":
        return WorldState(
            objects={k: replace(o) for k, o in self.objects.items()},
            grippers={k: replace(g) for k, g in self.grippers.items()},
            workspace=self.workspace,
            z_table=self.z_table,
            step=self.step,
            events=list(self.events),
            scene=self.scene,
        )

    def log(self, kind: str, **kwargs: Any) -> WorldEvent:
        event = WorldEvent(step=self.step, kind=kind, **kwargs)
        self.events.append(event)
        return event

    def event_tags(self) -> set[str]:
        return {e.tag for e in self.events}

    def support_height(
        self, xy: Iterable[float], exclude: str | None = None
    ) -> tuple[float, str | None]:
        """Resting height under ``xy`` and the support object providing it, if any."""
        x, y = (float(v) for v in xy)
        best, best_id = self.z_table, None
        for obj in sorted(self.objects.values(), key=lambda o: o.id):
            if not obj.support or obj.id == exclude or obj.supported_by == exclude:
                continue
            pts = obj.world_points()
            low, high = pts.min(axis=0), pts.max(axis=0)
            if low[0] <= x <= high[0] and low[1] <= y <= high[1] and high[2] > best:
                best, best_id = float(high[2]), obj.id
        return best, best_id


def build_world(
    scene: SceneDoc,
    config: SolverConfig | None = None,
    rng: np.random.Generator | None = None,
    jitter: float = 0.0,
) -> WorldState:
    """Instantiate a scene. ``jitter`` shifts every object uniformly in x-y by up to that much."""
    workspace = WorkspaceModel.from_scene(scene, config)
    objects: dict[str, RigidObject] = {}
    for doc in scene.objects:
        obj = RigidObject.from_doc(doc, scene.points_per_object)
        if jitter > 0.0 and rng is not None:
            dx, dy = rng.uniform(-jitter, jitter, size=2)
            obj.pose = obj.pose.with_position(obj.pose.p + np.array([dx, dy, 0.0]))
        objects[obj.id] = obj
    grippers = {
        arm: Gripper(arm=arm, pose=workspace.homes[arm]) for arm in sorted(scene.workspace)
    }
    world = WorldState(
        objects=objects,
        grippers=grippers,
        workspace=workspace,
        z_table=scene.z_table,
        scene=scene,
    )
    settle(world)
    return world


# ---------------------------------------------------------------------------
# Settling and attachment
# ---------------------------------------------------------------------------


def _follow_supports(world: WorldState) -> None:
    for obj in world.objects.values():
        if obj.supported_by and obj.support_transform is not None and obj.attached_to is None:
            base = world.objects[obj.supported_by]
            obj.pose = base.pose.compose(obj.support_transform)


def _lay_down(obj: RigidObject, heading: float | None = None) -> None:
    axis = obj.world_upright()
    if heading is not None:
        target = np.array([math.cos(heading), math.sin(heading), 0.0])
    else:
        target = axis - float(axis @ UP) * UP
        norm = float(np.linalg.norm(target))
        target = target / norm if norm > 1e-9 else np.array([1.0, 0.0, 0.0])
    obj.pose = obj.pose.rotated(alignment_rotation(axis, target))


def _rest(world: WorldState, obj: RigidObject) -> None:
    surface, support = world.support_height(obj.pose.p[:2], exclude=obj.id)
    lowest = float(obj.world_points()[:, 2].min())
    obj.pose = obj.pose.with_position(obj.pose.p + np.array([0.0, 0.0, surface - lowest]))
    obj.supported_by = support
    obj.support_transform = (
        world.objects[support].pose.inverse().compose(obj.pose) if support else None
    )


def settle(world: WorldState, object_ids: Iterable[str] | None = None) -> WorldState:
    """Rest every unattached object on the table or on a support beneath it.

    Free objects tilted past 45 degrees first fall to a lying orientation. Support
    objects settle before the objects that may rest on them.
    """
    ids = sorted(object_ids) if object_ids is not None else sorted(world.objects)
    ordered = sorted(ids, key=lambda i: (not world.objects[i].support, i))
    for object_id in ordered:
        obj = world.object(object_id)
        if obj.attached_to is not None:
            continue
        if obj.tilt() > LYING_ANGLE:
            _lay_down(obj)
        _rest(world, obj)
    _follow_supports(world)
    return world


def _detach(world: WorldState, obj: RigidObject) -> str | None:
    arm = obj.attached_to
    if arm is not None:
        world.grippers[arm].held = None
    obj.attached_to = None
    obj.grasp_transform = None
    return arm


def _attach(world: WorldState, arm: str, obj: RigidObject) -> None:
    gripper = world.grippers[arm]
    previous = obj.attached_to
    if previous is not None and previous != arm:
        world.grippers[previous].held = None
        world.log("handover", object=obj.id, arm=arm, detail={"from": previous})
    obj.attached_to = arm
    obj.supported_by = None
    obj.support_transform = None
    obj.grasp_transform = gripper.pose.inverse().compose(obj.pose)
    gripper.held = obj.id
    gripper.width = min(gripper.width, obj.grasp_width)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def execute_command(world: WorldState, command: StepCommand) -> list[WorldEvent]:
    """Apply one control step for every commanded arm and advance the step counter."""
    events: list[WorldEvent] = []
    released: list[str] = []
    ws = world.workspace
    for arm in sorted(command):
        cmd = command[arm]
        gripper = world.grippers[arm]
        moved = float(np.linalg.norm(cmd.pose.p - gripper.pose.p))
        turned = rotation_angle(gripper.pose, cmd.pose)
        if moved > ws.max_translation + 1e-9 or turned > ws.max_rotation + 1e-9:
            raise ValueError(
                f"Command for {arm} exceeds velocity limits ({moved:.4f} m, {turned:.4f} rad)"
            )
        if cmd.release and gripper.closed:
            gripper.closed = False
            if gripper.held is not None:
                obj = world.objects[gripper.held]
                _detach(world, obj)
                released.append(obj.id)
                events.append(world.log("release", object=obj.id, arm=arm))
        gripper.pose = cmd.pose
        gripper.width = float(np.clip(cmd.width, 0.0, 0.10))
        if cmd.close:
            gripper.closed = True
            candidate = cmd.candidate
            if candidate is not None:
                obj = world.objects[candidate]
                if float(np.linalg.norm(obj.pose.p - gripper.pose.p)) <= GRASP_TOLERANCE:
                    _attach(world, arm, obj)
                    events.append(world.log("grasp", object=obj.id, arm=arm))
                else:
                    gripper.width = 0.0
            elif gripper.held is None:
                gripper.width = 0.0

    for gripper in world.grippers.values():
        if gripper.held is not None:
            obj = world.objects[gripper.held]
            obj.pose = gripper.pose.compose(obj.grasp_transform or Pose())
    _follow_supports(world)
    if released:
        settle(world, released)
    world.step += 1
    return events


# ---------------------------------------------------------------------------
# Disturbances
# ---------------------------------------------------------------------------


def _held_object(world: WorldState) -> str | None:
    for arm in sorted(world.grippers):
        if world.grippers[arm].held:
            return world.grippers[arm].held
    return None


def drop(
    world: WorldState, object_id: str, rng: np.random.Generator | None = None
) -> list[WorldEvent]:
    """Let a held object slip: it lands near its release x-y and falls over unless flat."""
    obj = world.object(object_id)
    if obj.attached_to is None:
        logger.warning("Drop on %r ignored: object is not held", object_id)
        return []
    arm = _detach(world, obj)
    gripper = world.grippers[arm] if arm else None
    if gripper is not None:
        gripper.width = 0.0
    offset = rng.uniform(-DROP_JITTER, DROP_JITTER, size=2) if rng is not None else np.zeros(2)
    heading = float(rng.uniform(0.0, 2.0 * math.pi)) if rng is not None else 0.0
    obj.pose = obj.pose.with_position(obj.pose.p + np.array([offset[0], offset[1], 0.0]))
    if not obj.is_flat():
        _lay_down(obj, heading)
    settle(world, [obj.id])
    return [
        world.log(
            "drop",
            object=obj.id,
            arm=arm,
            detail={"position": [round(float(v), 6) for v in obj.pose.p]},
            disturbance=True,
        )
    ]


def inject(
    world: WorldState, event: ScheduledEventDoc, rng: np.random.Generator | None = None
) -> list[WorldEvent]:
    """Apply a Drop, Shift or Tilt disturbance.

    Without an explicit object the event targets whatever is held at that moment.

    Raises:
        UnknownObjectError: the named object is not in the scene.
    """
    object_id = event.object or _held_object(world)
    if object_id is None:
        logger.warning("%s event at step %d ignored: nothing is held", event.kind, world.step)
        return []
    obj = world.object(object_id)
    if event.kind == "drop":
        return drop(world, object_id, rng)
    arm = _detach(world, obj)
    if event.kind == "shift":
        delta = np.asarray(event.delta, dtype=float)
        obj.pose = obj.pose.with_position(obj.pose.p + delta)
        detail: dict[str, Any] = {"delta": list(event.delta or ())}
    else:
        axis = np.asarray(event.axis, dtype=float)
        rotation = Rotation.from_rotvec(axis / np.linalg.norm(axis) * float(event.angle or 0.0))
        obj.pose = obj.pose.rotated(rotation)
        detail = {"angle": event.angle, "axis": list(event.axis or ())}
    if arm is not None:
        world.grippers[arm].width = 0.0
    # A shift of a resting object keeps it resting; anything else falls.
    settle(world, [object_id])
    return [world.log(event.kind, object=object_id, arm=arm, detail=detail, disturbance=True)]


@dataclass(frozen=True)
class DisturbanceModel:
    mode: str = "bernoulli"
    p: float = 0.0
    events: tuple[ScheduledEventDoc, ...] = ()

    def __post_init__(self) -> None:
        if not 0.0 <= self.p <= 1.0:
            raise ValueError(f"drop probability must lie in [0, 1], got {self.p}")

    @classmethod
    def from_doc(cls, doc: DisturbanceDoc) -> "DisturbanceModel":
        return cls(mode=doc.mode, p=doc.p, events=tuple(doc.events))

    @property
    def bernoulli(self) -> bool:
        return self.mode == "bernoulli" and self.p > 0.0

    def for_action(self, index: int) -> list[ScheduledEventDoc]:
        return [e for e in self.events if e.at_action == index]

    def at_step(self, step: int) -> list[ScheduledEventDoc]:
        return [e for e in self.events if e.at_step == step]


# ---------------------------------------------------------------------------
# Atomic actions
# ---------------------------------------------------------------------------


def _held_steps(world: WorldState, action: Any, ctx: SkillContext, arm: str) -> int:
    """Steps of ``action`` before ``arm`` releases, from a disturbance-free dry run."""
    dry = world.copy()
    count = 0
    for command in action_commands(dry, action, ctx):
        if arm in command and command[arm].release:
            break
        execute_command(dry, command)
        count += 1
    return count


@dataclass
class StepOutcome:
    command: StepCommand
    events: list[WorldEvent]


class ActionRun:
    """Step-wise execution of one atomic action with its disturbances.

    A Bernoulli drop is drawn once per commanding arm that holds an object when the
    action starts; the drop step is uniform over the steps before that arm releases.
    """

    def __init__(
        self,
        world: WorldState,
        action: Any,
        ctx: SkillContext,
        disturbance: DisturbanceModel | None = None,
        rng: np.random.Generator | None = None,
        action_index: int = 0,
        node: Any = None,
        path_constraints: tuple[Any, ...] = (),
        max_step: int | None = None,
    ):
        self.world = world
        self.action = action
        self.steps = 0
        self._rng = rng
        self._max_step = max_step
        self._disturbance = disturbance or DisturbanceModel()
        self._commands: Iterator[StepCommand] = action_commands(
            world, action, ctx, node=node, path_constraints=path_constraints
        )
        self._drops: dict[int, list[str]] = {}
        self._scheduled: dict[int, list[ScheduledEventDoc]] = {}
        self._poured: set[str] = set()
        self.late_events: list[WorldEvent] = []

        if self._disturbance.bernoulli and rng is not None:
            for arm in action.arms:
                held = world.grippers[arm].held
                if held is None:
                    continue
                if rng.random() < self._disturbance.p:
                    if isinstance(action, SolverTransition):
                        window = ctx.config.horizon
                    else:
                        window = _held_steps(world, action, ctx, arm)
                    if window > 0:
                        self._drops.setdefault(int(rng.integers(window)), []).append(held)
        for event in self._disturbance.for_action(action_index):
            self._scheduled.setdefault(event.offset, []).append(event)

    def step(self) -> StepOutcome | None:
        """Execute the next command; ``None`` once the action is exhausted."""
        command = next(self._commands, None)
        if command is None:
            self._flush_late_events()
            return None
        if self._max_step is not None and self.world.step >= self._max_step:
            raise StepBudgetExceeded(f"Step budget exhausted at step {self.world.step}")
        events = execute_command(self.world, command)
        local = self.steps
        self.steps += 1
        for object_id in self._drops.pop(local, []):
            if self.world.objects[object_id].attached_to is not None:
                events += drop(self.world, object_id, self._rng)
        for event in self._scheduled.pop(local, []):
            events += inject(self.world, event, self._rng)
        for event in self._disturbance.at_step(self.world.step - 1):
            events += inject(self.world, event, self._rng)
        events += self._check_pour(command)
        return StepOutcome(command=command, events=events)

    def _flush_late_events(self) -> None:
        for offset in sorted(self._scheduled):
            for event in self._scheduled[offset]:
                logger.debug("Scheduled %s past the action end; applied at its end", event.kind)
                self.late_events += inject(self.world, event, self._rng)
        self._scheduled.clear()

    def _check_pour(self, command: StepCommand) -> list[WorldEvent]:
        events: list[WorldEvent] = []
        for arm, cmd in sorted(command.items()):
            gripper = self.world.grippers[arm]
            if cmd.pour_target is None or arm in self._poured or gripper.held is None:
                continue
            obj = self.world.objects[gripper.held]
            target = self.world.object(cmd.pour_target)
            lateral = float(np.linalg.norm(obj.pose.p[:2] - target.pose.p[:2]))
            if obj.tilt() > POUR_ANGLE and lateral <= POUR_RADIUS:
                self._poured.add(arm)
                events.append(
                    self.world.log(
                        "poured", object=obj.id, arm=arm, detail={"target": target.id}
                    )
                )
        return events


def execute_atomic(
    world: WorldState,
    action: Any,
    ctx: SkillContext,
    disturbance: DisturbanceModel | None = None,
    rng: np.random.Generator | None = None,
    action_index: int = 0,
) -> tuple[WorldState, int]:
    """Run an atomic action to completion; returns the world and the steps taken.

    Raises:
        UnknownObjectError: the action references an object not in the scene.
        UnreachableTargetError: a solver-driven target could not be reached.
    """
    run = ActionRun(world, action, ctx, disturbance, rng, action_index)
    while run.step() is not None:
        pass
    return world, run.steps


# ---------------------------------------------------------------------------
# Success
# ---------------------------------------------------------------------------


def check_success(world: WorldState, terminal: Any, tol: float = 0.0) -> bool:
    """Terminal sub-goals on noiseless features, plus every required event in the log."""
    perception = perceive(world, NoiseConfig(sigma=0.0), np.random.default_rng(0))
    z = extract_features(perception, world.robot_state(), required_keys(list(terminal.sub_goals)))
    try:
        satisfied = all(eval_detector(c, z) <= tol for c in terminal.sub_goals)
    except MissingFeatureError:
        return False
    tags = world.event_tags()
    return satisfied and all(tag in tags for tag in terminal.required_events)
