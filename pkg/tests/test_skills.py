# tests/test_skills.py
from __future__ import annotations

from typing import Callable

import numpy as np
import pytest

from chordgraph.actions import (
    BackAction,
    DriveAction,
    GraspAction,
    MoveByOffsetAction,
    MoveToTargetAction,
    RotateEefAction,
    SolverTransition,
)
from chordgraph.config import SolverConfig
from chordgraph.detectors import ExprTemplate
from chordgraph.exceptions import UnknownObjectError, UnreachableTargetError
from chordgraph.geometry import TOP_DOWN_QUAT
from chordgraph.graph import Node
from chordgraph.schema import GripperIntentDoc, SceneDoc
from chordgraph.simworld import WorldState, build_world, drop, execute_atomic, execute_command
from chordgraph.skills import SkillContext, action_commands, grasp_candidate, ground_truth_estimate
from chordgraph.solvers import build_collision_field

FAST = SolverConfig(restarts=6, refine=2, max_iterations=100)


@pytest.fixture
def world(make_scene: Callable[..., SceneDoc]) -> WorldState:
    bottle = {
        "id": "bottle",
        "shape": "cylinder",
        "dims": [0.03, 0.2],
        "pose": {"position": [0.45, -0.15, 0.1]},
    }
    return build_world(make_scene(objects=[bottle]), FAST)


@pytest.fixture
def ctx(world: WorldState) -> SkillContext:
    assert world.scene is not None
    return SkillContext(world.workspace, build_collision_field(world.scene, FAST), FAST)


def _run(world: WorldState, commands: object) -> int:
    count = 0
    for command in commands:  # type: ignore[attr-defined]
        execute_command(world, command)
        count += 1
    return count


class TestGraspCandidate:
    """Tests for grasp_candidate()."""

    def test_only_objects_in_reach(self, world: WorldState) -> None:
        """Test that the candidate must be close to the open gripper."""
        gripper = world.grippers["right"]
        assert grasp_candidate(world, "right") is None
        gripper.pose = world.objects["bottle"].pose
        assert grasp_candidate(world, "right") == "bottle"
        gripper.width = 0.05
        assert grasp_candidate(world, "right") is None


class TestArmSkills:
    """Tests for the per-arm motion primitives."""

    def test_move_to_target_is_clipped(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that a target outside the workspace box is clipped onto it."""
        _, steps = execute_atomic(
            world, MoveToTargetAction(robot="right", x=1.0, y=-0.25, z=0.4), ctx
        )
        assert world.grippers["right"].pose.position == pytest.approx((0.7, -0.25, 0.4))
        assert steps == 20

    def test_back_returns_home(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that back restores the home pose exactly."""
        execute_atomic(world, MoveByOffsetAction(robot="left", dx=0.1, dz=-0.1), ctx)
        execute_atomic(world, RotateEefAction(robot="left", angle=0.5, axis="z"), ctx)
        execute_atomic(world, BackAction(robot="left"), ctx)
        assert world.grippers["left"].pose == ctx.home("left")

    def test_upright_with_empty_gripper_restores_orientation(
        self, world: WorldState, ctx: SkillContext
    ) -> None:
        """Test that uprighting an empty gripper returns to the home orientation in place."""
        execute_atomic(world, RotateEefAction(robot="right", angle=0.5, axis="x"), ctx)
        position = world.grippers["right"].pose.position
        execute_atomic(world, RotateEefAction(robot="right", upright=True), ctx)
        assert world.grippers["right"].pose.quat == TOP_DOWN_QUAT
        assert world.grippers["right"].pose.position == position

    def test_grasp_restands_fallen_object(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that grasping a lying object lifts it and stands it back up."""
        execute_atomic(world, GraspAction(robot="right", obj="bottle"), ctx)
        drop(world, "bottle", np.random.default_rng(4))
        assert world.objects["bottle"].tilt() > np.pi / 4
        execute_atomic(world, GraspAction(robot="right", obj="bottle"), ctx)
        assert world.grippers["right"].held == "bottle"
        assert world.objects["bottle"].tilt() == pytest.approx(0.0, abs=1e-6)
        assert ground_truth_estimate(world).carried == {"right": "bottle"}

    def test_commands_are_generated_lazily(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that an unknown object only raises once commands are drawn."""
        commands = action_commands(world, GraspAction(robot="left", obj="vase"), ctx)
        with pytest.raises(UnknownObjectError):
            next(iter(commands))


class TestDrive:
    """Tests for lock-step dual-arm commands."""

    def test_lock_step(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that the shorter sub-action drops out while the longer continues."""
        action = DriveAction(
            left=MoveByOffsetAction(robot="left", dz=-0.1),
            right=MoveByOffsetAction(robot="right", dz=-0.04),
        )
        steps = list(action_commands(world, action, ctx))
        assert [sorted(step) for step in steps] == [["left", "right"]] * 2 + [["left"]] * 3
        assert action.arms == ("left", "right")

    def test_arm_names_must_match(self) -> None:
        """Test that a drive slot commands its own arm."""
        with pytest.raises(ValueError, match="drive.left"):
            DriveAction(left=MoveByOffsetAction(robot="right", dz=0.1))
        with pytest.raises(ValueError, match="at least one"):
            DriveAction()


class TestSolverTransition:
    """Tests for solver-driven transitions."""

    def test_reaches_node_keyframe(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that replanned chunks reach the synthesized keyframe and apply the intent."""
        node = Node(
            id="above_bottle",
            sub_goals=(
                ExprTemplate(expr="norm(gripper_origin(right) - [0.45, -0.2, 0.3]) - 0.01"),
            ),
            gripper_intent={"right": GripperIntentDoc(closed=True)},
        )
        steps = _run(world, action_commands(world, SolverTransition(arm="right"), ctx, node))
        gripper = world.grippers["right"]
        assert steps > 0
        assert np.linalg.norm(gripper.pose.p - [0.45, -0.2, 0.3]) <= 0.01 + FAST.tol
        assert gripper.closed
        assert gripper.width == 0.0

    def test_missing_node(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that a transition without its target node is unreachable."""
        commands = action_commands(world, SolverTransition(arm="left"), ctx)
        with pytest.raises(UnreachableTargetError):
            next(iter(commands))

    def test_unreachable_keyframe(self, world: WorldState, ctx: SkillContext) -> None:
        """Test that an infeasible keyframe surfaces as an unreachable target."""
        node = Node(
            id="far",
            sub_goals=(ExprTemplate(expr="norm(gripper_origin(left) - [1.5, 0.0, 0.3]) - 0.01"),),
        )
        commands = action_commands(world, SolverTransition(arm="left"), ctx, node)
        with pytest.raises(UnreachableTargetError) as exc_info:
            next(iter(commands))
        assert exc_info.value.problem is not None
