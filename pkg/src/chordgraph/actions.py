# src/chordgraph/actions.py
"""Atomic actions used to compose edge programs.

Parameters follow the skill library: every single-arm action names its ``robot``
(``left`` or ``right``); ``drive`` runs one optional sub-action per arm in lock step.
"""

from __future__ import annotations

import math
from typing import Annotated, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from chordgraph.config import MAX_GRIPPER_OPENING

Arm = Literal["left", "right"]

DEFAULT_OPEN_WIDTH = 0.09


class _Action(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    robot: Arm

    @property
    def arms(self) -> tuple[str, ...]:
        return (self.robot,)

    @property
    def objects(self) -> tuple[str, ...]:
        return ()


class GraspAction(_Action):
    """Approach and grasp an object; a fallen object is re-grasped and stood up."""

    action: Literal["grasp"] = "grasp"
    obj: str
    pre_grasp_dis: float = Field(default=0.10, ge=0.0)
    sample_num: int = Field(default=5, ge=1)
    lift: float = Field(default=0.10, ge=0.0, description="Lift used when uprighting.")

    @property
    def objects(self) -> tuple[str, ...]:
        return (self.obj,)


class OpenGripperAction(_Action):
    action: Literal["open_gripper"] = "open_gripper"
    sample_num: int = Field(default=5, ge=1)
    width: float = Field(default=DEFAULT_OPEN_WIDTH, gt=0.0, le=MAX_GRIPPER_OPENING)


class CloseGripperAction(_Action):
    action: Literal["close_gripper"] = "close_gripper"
    sample_num: int = Field(default=5, ge=1)


class MoveToObjAction(_Action):
    """Move the end effector to an object's current position plus offsets."""

    action: Literal["move_to_obj"] = "move_to_obj"
    obj: str
    x_offset: float = 0.0
    y_offset: float = 0.0
    z_offset: float = 0.0

    @property
    def objects(self) -> tuple[str, ...]:
        return (self.obj,)


class MoveToTargetAction(_Action):
    action: Literal["move_to_target"] = "move_to_target"
    x: float
    y: float
    z: float
    quat: tuple[float, float, float, float] | None = None


class MoveByOffsetAction(_Action):
    action: Literal["move_by_offset"] = "move_by_offset"
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0


class RotateEefAction(_Action):
    """Rotate the end effector about a world axis through its origin.

    With ``upright`` the rotation instead restores the held object's upright axis to +z.
    ``pour_target`` names the receptacle checked for the pour event.
    """

    action: Literal["rotate_eef"] = "rotate_eef"
    angle: float = Field(default=0.0, ge=-math.pi, le=math.pi)
    axis: Literal["x", "y", "z"] = "x"
    upright: bool = False
    pour_target: str | None = None

    @property
    def objects(self) -> tuple[str, ...]:
        return (self.pour_target,) if self.pour_target else ()


class PlaceAction(_Action):
    """Carry the held object above (x, y), lower it onto the table and release."""

    action: Literal["place"] = "place"
    x: float
    y: float
    z_offset: float = Field(default=0.0, ge=0.0)
    hover: float = Field(default=0.10, ge=0.0)
    sample_num: int = Field(default=5, ge=1)


class BackAction(_Action):
    """Return to the arm's home pose."""

    action: Literal["back"] = "back"


ArmAction = Annotated[
    Union[
        GraspAction,
        OpenGripperAction,
        CloseGripperAction,
        MoveToObjAction,
        MoveToTargetAction,
        MoveByOffsetAction,
        RotateEefAction,
        PlaceAction,
        BackAction,
    ],
    Field(discriminator="action"),
]


class DriveAction(BaseModel):
    """Run a left and a right sub-action together; either may be ``None``."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    action: Literal["drive"] = "drive"
    left: ArmAction | None = None
    right: ArmAction | None = None

    @model_validator(mode="after")
    def _check_arms(self) -> "DriveAction":
        if self.left is None and self.right is None:
            raise ValueError("drive needs at least one sub-action")
        if self.left is not None and self.left.robot != "left":
            raise ValueError("drive.left must command robot 'left'")
        if self.right is not None and self.right.robot != "right":
            raise ValueError("drive.right must command robot 'right'")
        return self

    @property
    def arms(self) -> tuple[str, ...]:
        return tuple(a.robot for a in (self.left, self.right) if a is not None)

    @property
    def objects(self) -> tuple[str, ...]:
        return tuple(o for a in (self.left, self.right) if a is not None for o in a.objects)


AtomicActionSpec = Annotated[
    Union[
        GraspAction,
        OpenGripperAction,
        CloseGripperAction,
        MoveToObjAction,
        MoveToTargetAction,
        MoveByOffsetAction,
        RotateEefAction,
        PlaceAction,
        BackAction,
        DriveAction,
    ],
    Field(discriminator="action"),
]

ACTION_NAMES = (
    "drive",
    "grasp",
    "open_gripper",
    "close_gripper",
    "move_to_obj",
    "move_to_target",
    "move_by_offset",
    "rotate_eef",
    "place",
    "back",
)


class SolverTransition(BaseModel):
    """Drive ``arm`` to the keyframe synthesized for the edge's target node."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    arm: Arm

    @property
    def arms(self) -> tuple[str, ...]:
        return (self.arm,)


class SolverProgram(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    solver: SolverTransition
