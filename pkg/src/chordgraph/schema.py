# src/chordgraph/schema.py
"""Task-document schema.

The same models validate task files, planner-service responses and the canonical
serialization written by :func:`chordgraph.graph.graph_to_document`.
"""

from __future__ import annotations

import logging
import math
from typing import Any, Literal, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from chordgraph.actions import ArmAction, AtomicActionSpec, DriveAction, SolverProgram
from chordgraph.config import (
    MAX_GRIPPER_OPENING,
    ExecutorConfig,
    MonitorDefaults,
    NoiseConfig,
    SolverConfig,
)
from chordgraph.detectors import DetectorTemplate
from chordgraph.geometry import IDENTITY_QUAT

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

Vec3 = tuple[float, float, float]
Quat = tuple[float, float, float, float]


class _Doc(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class PoseDoc(_Doc):
    position: Vec3
    quat: Quat = IDENTITY_QUAT


class WorkspaceDoc(_Doc):
    """Reachable box and home pose of one arm."""

    low: Vec3
    high: Vec3
    home: PoseDoc

    @model_validator(mode="after")
    def _check_box(self) -> "WorkspaceDoc":
        if any(lo >= hi for lo, hi in zip(self.low, self.high)):
            raise ValueError("workspace box must be nonempty (low < high on every axis)")
        return self


class ObjectDoc(_Doc):
    """Rigid object; ``dims`` is (x, y, z) extents for a box, (radius, height) for a cylinder."""

    id: str = Field(min_length=1)
    shape: Literal["box", "cylinder"]
    dims: tuple[float, ...]
    pose: PoseDoc
    upright_axis: Vec3 = (0.0, 0.0, 1.0)
    grasp_width: float | None = Field(default=None, gt=0.0, le=MAX_GRIPPER_OPENING)
    support: bool = Field(default=False, description="Other objects may rest on top of it.")

    @model_validator(mode="after")
    def _check_dims(self) -> "ObjectDoc":
        expected = 3 if self.shape == "box" else 2
        if len(self.dims) != expected or any(d <= 0 for d in self.dims):
            raise ValueError(f"{self.shape} needs {expected} positive dims, got {self.dims}")
        return self

    @property
    def resolved_grasp_width(self) -> float:
        if self.grasp_width is not None:
            return self.grasp_width
        if self.shape == "cylinder":
            return 2.0 * self.dims[0]
        return min(self.dims[0], self.dims[1])


class ObstacleDoc(_Doc):
    """Static axis-aligned box obstacle."""

    id: str
    center: Vec3
    size: Vec3


class SceneDoc(_Doc):
    z_table: float = 0.0
    points_per_object: int = Field(default=48, ge=3)
    objects: list[ObjectDoc] = Field(default_factory=list)
    obstacles: list[ObstacleDoc] = Field(default_factory=list)
    workspace: dict[Literal["left", "right"], WorkspaceDoc]

    @model_validator(mode="after")
    def _unique_ids(self) -> "SceneDoc":
        ids = [o.id for o in self.objects]
        if len(ids) != len(set(ids)):
            raise ValueError("object ids must be unique")
        if any(i.startswith("gripper") for i in ids):
            raise ValueError("object ids must not start with 'gripper'")
        return self


class GripperIntentDoc(_Doc):
    closed: bool = False
    width: float = Field(default=0.09, ge=0.0, le=MAX_GRIPPER_OPENING)


class NodeDoc(_Doc):
    id: str = Field(min_length=1)
    kind: Literal["nominal", "recovery", "terminal"] = "nominal"
    sub_goals: list[DetectorTemplate] = Field(default_factory=list)
    gripper_intent: dict[Literal["left", "right"], GripperIntentDoc] = Field(
        default_factory=dict
    )
    required_events: list[str] = Field(default_factory=list)


Program = Union[list[AtomicActionSpec], SolverProgram]

# Nominal steps charged per action when an edge omits its weight.
_ACTION_STEPS = {
    "grasp": 30,
    "open_gripper": 5,
    "close_gripper": 5,
    "move_to_obj": 15,
    "move_to_target": 15,
    "move_by_offset": 5,
    "rotate_eef": 10,
    "place": 25,
    "back": 15,
}


def _arm_action_steps(action: Any) -> int:
    if action.action == "rotate_eef" and not action.upright:
        return max(1, math.ceil(abs(action.angle) / 0.1))
    steps = _ACTION_STEPS[action.action]
    if action.action in ("open_gripper", "close_gripper"):
        steps = action.sample_num
    return int(steps)


def planned_steps(program: Program) -> int:
    """Rough step count of a program; used as the default edge weight."""
    if isinstance(program, SolverProgram):
        return 20
    total = 0
    for action in program:
        if isinstance(action, DriveAction):
            parts: list[ArmAction] = [a for a in (action.left, action.right) if a is not None]
            total += max(_arm_action_steps(a) for a in parts)
        else:
            total += _arm_action_steps(action)
    return total


class EdgeDoc(_Doc):
    id: str = Field(min_length=1)
    from_: str = Field(alias="from")
    to: str
    program: Program = Field(default_factory=list)
    path_constraints: list[DetectorTemplate] = Field(default_factory=list)
    weight: float | None = Field(default=None, ge=0.0)


class RecoveryEdgeDoc(_Doc):
    id: str = Field(min_length=1)
    program: Program = Field(default_factory=list)
    path_constraints: list[DetectorTemplate] = Field(default_factory=list)
    weight: float | None = Field(default=None, ge=0.0)


class MergeDoc(_Doc):
    to: str
    edge: RecoveryEdgeDoc


class FailureModeDoc(_Doc):
    id: str = Field(min_length=1)
    edge: str
    detector: DetectorTemplate


class RecoveryDoc(_Doc):
    """One anticipated failure mode and the branch that recovers from it.

    Either ``merge_to`` routes the entry edge straight to an existing node, or ``node``
    declares a recovery node whose ``merges`` lead back into the task graph.

    The failing edge may itself be a recovery edge declared earlier in the list. Instead
    of a new ``entry``, ``route_to`` may then name an existing recovery edge leaving the
    same node, which allows retry loops.
    """

    failure_mode: FailureModeDoc
    intent: str = ""
    entry: RecoveryEdgeDoc | None = None
    route_to: str | None = None
    merge_to: str | None = None
    node: NodeDoc | None = None
    merges: list[MergeDoc] = Field(default_factory=list)

    @model_validator(mode="after")
    def _check_shape(self) -> "RecoveryDoc":
        if (self.entry is None) == (self.route_to is None):
            raise ValueError("recovery needs exactly one of 'entry' or 'route_to'")
        if self.route_to is not None:
            if self.node is not None or self.merge_to is not None or self.merges:
                raise ValueError("'route_to' reuses an edge and takes no merge or node")
            return self
        if self.node is None and self.merge_to is None:
            raise ValueError("recovery entry needs either 'merge_to' or 'node'")
        if self.node is not None and self.merge_to is not None:
            raise ValueError("recovery entry cannot declare both 'merge_to' and 'node'")
        if self.node is not None and not self.merges:
            raise ValueError("a recovery node needs at least one merge edge")
        return self


class ScheduledEventDoc(_Doc):
    """A disturbance applied at a global atomic-action index or at a control step."""

    kind: Literal["drop", "shift", "tilt"]
    at_action: int | None = Field(default=None, ge=0)
    offset: int = Field(default=0, ge=0, description="Steps into the action.")
    at_step: int | None = Field(default=None, ge=0)
    object: str | None = None
    delta: Vec3 | None = None
    angle: float | None = None
    axis: Vec3 | None = None

    @model_validator(mode="after")
    def _check_event(self) -> "ScheduledEventDoc":
        if (self.at_action is None) == (self.at_step is None):
            raise ValueError("scheduled event needs exactly one of 'at_action' or 'at_step'")
        if self.kind == "shift" and self.delta is None:
            raise ValueError("shift event needs 'delta'")
        if self.kind == "tilt":
            if self.angle is None or self.axis is None:
                raise ValueError("tilt event needs 'angle' and 'axis'")
            if abs(self.axis[2]) > 1e-9:
                raise ValueError("tilt axis must be horizontal")
        return self


class DisturbanceDoc(_Doc):
    mode: Literal["bernoulli", "scheduled"] = "bernoulli"
    p: float = Field(default=0.0, ge=0.0, le=1.0)
    events: list[ScheduledEventDoc] = Field(default_factory=list)


class TaskDocument(_Doc):
    schema_version: Literal[1]
    name: str = Field(min_length=1)
    instruction: str = ""
    scene: SceneDoc
    nodes: list[NodeDoc] = Field(min_length=1)
    edges: list[EdgeDoc] = Field(default_factory=list)
    start: str
    terminal: str
    recovery: list[RecoveryDoc] = Field(default_factory=list)
    disturbance: DisturbanceDoc = DisturbanceDoc()
    noise: NoiseConfig = NoiseConfig()
    monitor_defaults: MonitorDefaults = MonitorDefaults()
    solver: SolverConfig = SolverConfig()
    executor: ExecutorConfig = ExecutorConfig()


class GraphDocument(_Doc):
    """The graph-only subset of a task document."""

    schema_version: Literal[1] = 1
    name: str = ""
    nodes: list[NodeDoc] = Field(min_length=1)
    edges: list[EdgeDoc] = Field(default_factory=list)
    start: str
    terminal: str
    recovery: list[RecoveryDoc] = Field(default_factory=list)
    monitor_defaults: MonitorDefaults = MonitorDefaults()
