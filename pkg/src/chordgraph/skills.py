# src/chordgraph/skills.py
"""Expansion of atomic actions into per-step arm commands.

Every action is a generator. Targets are resolved lazily against the world at the start
of each motion segment, so a segment that begins after a disturbance sees the new object
poses. Motions are straight lines under the per-step translation and rotation limits.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import logging
import math
from typing import TYPE_CHECKING, Any, Callable, Iterator, Mapping

import numpy as np
from scipy.spatial.transform import Rotation

from chordgraph.actions import (
    BackAction,
    CloseGripperAction,
    DriveAction,
    GraspAction,
    MoveByOffsetAction,
    MoveToObjAction,
    MoveToTargetAction,
    OpenGripperAction,
    PlaceAction,
    RotateEefAction,
    SolverTransition,
)
from chordgraph.config import NoiseConfig, SolverConfig
from chordgraph.exceptions import InfeasibleError, UnreachableTargetError
from chordgraph.features import perceive
from chordgraph.geometry import (
    TOP_DOWN_QUAT,
    UP,
    Pose,
    Vector,
    alignment_rotation,
    interpolate,
    rotation_angle,
    steps_between,
)
from chordgraph.solvers import (
    CollisionField,
    PathProblem,
    SceneEstimate,
    SubgoalProblem,
    WorkspaceModel,
    solve_path,
    solve_subgoal,
)

if TYPE_CHECKING:
    from chordgraph.simworld import WorldState

logger = logging.getLogger(__name__)

GRASP_TOLERANCE = 0.02
"""Max centroid-to-gripper distance at which closing attaches an object."""

LYING_ANGLE = math.pi / 4
OPEN_WIDTH = 0.09
ACTUATION_STEPS = 5

_AXES = {"x": np.array([1.0, 0.0, 0.0]), "y": np.array([0.0, 1.0, 0.0]), "z": UP}


@dataclass(frozen=True)
class ArmCommand:
    """One control-step target for one arm.

    ``close`` marks the final step of a closing motion (attach ``candidate`` if still in
    reach); ``release`` marks the first step of an opening motion.
    """

    arm: str
    pose: Pose
    width: float
    close: bool = False
    candidate: str | None = None
    release: bool = False
    pour_target: str | None = None


StepCommand = Mapping[str, ArmCommand]


def ground_truth_estimate(world: "WorldState") -> SceneEstimate:
    perception = perceive(world, NoiseConfig(sigma=0.0), np.random.default_rng(0))
    return SceneEstimate(perception=perception, robot=world.robot_state(), carried=world.carried())


@dataclass
class SkillContext:
    """What actions need beyond the world: limits, collision field and solver settings."""

    workspace: WorkspaceModel
    field: CollisionField
    config: SolverConfig = SolverConfig()
    rng: np.random.Generator = field(default_factory=lambda: np.random.default_rng(0))
    estimate: Callable[["WorldState"], SceneEstimate] = ground_truth_estimate

    def home(self, arm: str) -> Pose:
        return self.workspace.homes.get(arm, Pose.create((0.3, 0.0, 0.4), TOP_DOWN_QUAT))


def grasp_candidate(world: "WorldState", arm: str) -> str | None:
    """Nearest object this gripper could close on, or ``None``."""
    gripper = world.grippers[arm]
    best: tuple[float, str] | None = None
    for obj in world.objects.values():
        if obj.attached_to == arm or obj.grasp_width >= gripper.width:
            continue
        distance = float(np.linalg.norm(obj.pose.p - gripper.pose.p))
        if distance <= GRASP_TOLERANCE and (best is None or (distance, obj.id) < best):
            best = (distance, obj.id)
    return best[1] if best else None


# ---------------------------------------------------------------------------
# Segments
# ---------------------------------------------------------------------------


def _move(
    world: "WorldState", arm: str, goal: Pose, ctx: SkillContext, pour_target: str | None = None
) -> Iterator[ArmCommand]:
    ws = ctx.workspace
    goal = goal.with_position(ws.clip(arm, goal.p))
    start = world.grippers[arm].pose
    count = steps_between(start, goal, ws.max_translation, ws.max_rotation)
    for h in range(1, count + 1):
        pose = goal if h == count else interpolate(start, goal, h / count)
        yield ArmCommand(arm, pose, world.grippers[arm].width, pour_target=pour_target)


def _move_by(
    world: "WorldState", arm: str, delta: Vector, ctx: SkillContext
) -> Iterator[ArmCommand]:
    current = world.grippers[arm].pose
    yield from _move(world, arm, current.with_position(current.p + delta), ctx)


def _actuate(
    world: "WorldState", arm: str, close: bool, steps: int, width: float = OPEN_WIDTH
) -> Iterator[ArmCommand]:
    gripper = world.grippers[arm]
    start = gripper.width
    candidate = grasp_candidate(world, arm) if close else None
    if close:
        final = world.objects[candidate].grasp_width if candidate else 0.0
    else:
        final = width
    for h in range(1, steps + 1):
        yield ArmCommand(
            arm,
            world.grippers[arm].pose,
            start + (final - start) * h / steps,
            close=close and h == steps,
            candidate=candidate if close and h == steps else None,
            release=not close and h == 1,
        )


def _upright(
    world: "WorldState", arm: str, ctx: SkillContext, pour_target: str | None = None
) -> Iterator[ArmCommand]:
    """Rotate so the held object's upright axis points up; empty grippers return to home."""
    gripper = world.grippers[arm]
    if gripper.held is not None:
        rotation = alignment_rotation(world.objects[gripper.held].world_upright(), UP)
        goal = gripper.pose.rotated(rotation)
    else:
        goal = Pose(gripper.pose.position, ctx.home(arm).quat)
    yield from _move(world, arm, goal, ctx, pour_target)


def _approach_quat(world: "WorldState", arm: str, object_id: str, ctx: SkillContext) -> Rotation:
    home = ctx.home(arm).rotation
    obj = world.objects[object_id]
    if obj.tilt() <= LYING_ANGLE:
        return home
    axis = obj.world_upright()
    heading = math.atan2(axis[1], axis[0])
    # fingers close across the lying body
    return Rotation.from_rotvec((heading + 0.5 * math.pi) * UP) * home


# ---------------------------------------------------------------------------
# Atomic actions
# ---------------------------------------------------------------------------


def _grasp(world: "WorldState", action: GraspAction, ctx: SkillContext) -> Iterator[ArmCommand]:
    arm = action.robot
    obj = world.object(action.obj)
    if world.grippers[arm].held == obj.id:
        return
    if world.grippers[arm].closed:
        yield from _actuate(world, arm, False, action.sample_num)
    lying = obj.tilt() > LYING_ANGLE
    rotation = _approach_quat(world, arm, obj.id, ctx)
    above = obj.pose.p + action.pre_grasp_dis * UP
    yield from _move(world, arm, Pose.from_rotation(above, rotation), ctx)
    yield from _move(world, arm, Pose.from_rotation(obj.pose.p, rotation), ctx)
    yield from _actuate(world, arm, True, action.sample_num)
    if lying and world.grippers[arm].held == obj.id:
        # Fallen object: lift clear of the table, then stand it back up.
        yield from _move_by(world, arm, action.lift * UP, ctx)
        yield from _upright(world, arm, ctx)


def _place(world: "WorldState", action: PlaceAction, ctx: SkillContext) -> Iterator[ArmCommand]:
    arm = action.robot
    gripper = world.grippers[arm]
    surface, _ = world.support_height((action.x, action.y), exclude=gripper.held)
    if gripper.held is not None:
        lowest = float(world.objects[gripper.held].world_points()[:, 2].min())
        rest = surface + (gripper.pose.p[2] - lowest) + action.z_offset
    else:
        rest = surface + ctx.field.margin + 0.05 + action.z_offset
    quat = gripper.pose.quat
    yield from _move(world, arm, Pose((action.x, action.y, rest + action.hover), quat), ctx)
    yield from _move(world, arm, Pose((action.x, action.y, rest), quat), ctx)
    yield from _actuate(world, arm, False, action.sample_num)
    yield from _move_by(world, arm, action.hover * UP, ctx)


def _arm_commands(world: "WorldState", action: Any, ctx: SkillContext) -> Iterator[ArmCommand]:
    arm = action.robot
    gripper = world.grippers[arm]
    if isinstance(action, GraspAction):
        yield from _grasp(world, action, ctx)
    elif isinstance(action, OpenGripperAction):
        yield from _actuate(world, arm, False, action.sample_num, action.width)
    elif isinstance(action, CloseGripperAction):
        yield from _actuate(world, arm, True, action.sample_num)
    elif isinstance(action, MoveToObjAction):
        target = world.object(action.obj).pose.p + np.array(
            [action.x_offset, action.y_offset, action.z_offset]
        )
        yield from _move(world, arm, gripper.pose.with_position(target), ctx)
    elif isinstance(action, MoveToTargetAction):
        quat = action.quat if action.quat is not None else gripper.pose.quat
        yield from _move(world, arm, Pose.create((action.x, action.y, action.z), quat), ctx)
    elif isinstance(action, MoveByOffsetAction):
        yield from _move_by(world, arm, np.array([action.dx, action.dy, action.dz]), ctx)
    elif isinstance(action, RotateEefAction):
        if action.pour_target is not None:
            world.object(action.pour_target)
        if action.upright:
            yield from _upright(world, arm, ctx, action.pour_target)
        else:
            rotation = Rotation.from_rotvec(_AXES[action.axis] * action.angle)
            yield from _move(world, arm, gripper.pose.rotated(rotation), ctx, action.pour_target)
    elif isinstance(action, PlaceAction):
        yield from _place(world, action, ctx)
    elif isinstance(action, BackAction):
        yield from _move(world, arm, ctx.home(arm), ctx)
    else:  # pragma: no cover - the action union is closed
        raise TypeError(f"Unsupported action {type(action).__name__}")


def _single(commands: Iterator[ArmCommand]) -> Iterator[StepCommand]:
    for command in commands:
        yield {command.arm: command}


def _drive(world: "WorldState", action: DriveAction, ctx: SkillContext) -> Iterator[StepCommand]:
    """Lock-step: each control step carries one command per still-active arm."""
    active = {
        sub.robot: _arm_commands(world, sub, ctx)
        for sub in (action.left, action.right)
        if sub is not None
    }
    while active:
        step: dict[str, ArmCommand] = {}
        for arm in sorted(active):
            command = next(active[arm], None)
            if command is None:
                del active[arm]
            else:
                step[arm] = command
        if step:
            yield step


def _reached(a: Pose, b: Pose) -> bool:
    return float(np.linalg.norm(a.p - b.p)) <= 1e-9 and rotation_angle(a, b) <= 1e-9


def _solver_transition(
    world: "WorldState",
    transition: SolverTransition,
    ctx: SkillContext,
    node: Any,
    path_constraints: tuple[Any, ...],
) -> Iterator[StepCommand]:
    """Synthesize the target keyframe, then follow receding-horizon plans of M steps."""
    arm = transition.arm
    if node is None:
        raise UnreachableTargetError("Solver-driven transition needs its target node")
    try:
        problem = SubgoalProblem.for_node(
            node, ctx.estimate(world), ctx.workspace, ctx.field, ctx.config, arms=(arm,)
        )
        keyframe = solve_subgoal(problem, ctx.rng)[arm]
    except InfeasibleError as exc:
        raise UnreachableTargetError(str(exc), problem=exc.problem) from exc

    while not _reached(world.grippers[arm].pose, keyframe):
        current = world.grippers[arm].pose
        try:
            plan = solve_path(
                PathProblem(
                    arm=arm,
                    start=current,
                    goal=keyframe,
                    estimate=ctx.estimate(world),
                    workspace=ctx.workspace,
                    field=ctx.field,
                    constraints=tuple(path_constraints),
                    config=ctx.config,
                ),
                rng=ctx.rng,
            )
        except InfeasibleError as exc:
            raise UnreachableTargetError(str(exc), problem=exc.problem) from exc
        chunk = plan[1 : ctx.config.execute + 1]
        if all(_reached(pose, current) for pose in chunk):
            raise UnreachableTargetError(f"Path for {arm} makes no progress toward its keyframe")
        logger.debug("Replanned %s: %d of %d steps", arm, len(chunk), len(plan) - 1)
        for pose in chunk:
            yield {arm: ArmCommand(arm, pose, world.grippers[arm].width)}

    # Close before opening so a handover never leaves the object unheld.
    intents = sorted(node.gripper_intent.items(), key=lambda kv: (not kv[1].closed, kv[0]))
    for other, intent in intents:
        gripper = world.grippers[other]
        if intent.closed and not gripper.closed:
            yield from _single(_actuate(world, other, True, ACTUATION_STEPS))
        elif not intent.closed and gripper.closed:
            yield from _single(_actuate(world, other, False, ACTUATION_STEPS, intent.width))


def action_commands(
    world: "WorldState",
    action: Any,
    ctx: SkillContext,
    node: Any = None,
    path_constraints: tuple[Any, ...] = (),
) -> Iterator[StepCommand]:
    """Lazily generated per-step commands of one atomic action or solver transition.

    Raises:
        UnknownObjectError: the action references an object not in the scene.
        UnreachableTargetError: a solver-driven transition is infeasible.
    """
    if isinstance(action, DriveAction):
        return _drive(world, action, ctx)
    if isinstance(action, SolverTransition):
        return _solver_transition(world, action, ctx, node, path_constraints)
    return _single(_arm_commands(world, action, ctx))
