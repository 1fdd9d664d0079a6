# tests/conftest.py
from __future__ import annotations

from typing import Any, Callable

import pytest

from chordgraph.features import GripperReading, PerceptionOutput, RobotState
from chordgraph.geometry import TOP_DOWN_QUAT, Pose
from chordgraph.schema import SceneDoc
from chordgraph.solvers import SceneEstimate

LEFT_HOME = (0.3, 0.25, 0.4)
RIGHT_HOME = (0.3, -0.25, 0.4)


def scene_data(**extra: Any) -> dict[str, Any]:
    """Two arms sharing one table-top box; objects and obstacles come from ``extra``."""
    box = {"low": [0.1, -0.4, 0.0], "high": [0.7, 0.4, 0.6]}
    data: dict[str, Any] = {
        "workspace": {
            "left": {**box, "home": {"position": list(LEFT_HOME), "quat": list(TOP_DOWN_QUAT)}},
            "right": {**box, "home": {"position": list(RIGHT_HOME), "quat": list(TOP_DOWN_QUAT)}},
        }
    }
    data.update(extra)
    return data


@pytest.fixture
def make_scene() -> Callable[..., SceneDoc]:
    """Factory for scenes with extra objects or obstacles."""

    def factory(**extra: Any) -> SceneDoc:
        return SceneDoc.model_validate(scene_data(**extra))

    return factory


@pytest.fixture
def scene() -> SceneDoc:
    return SceneDoc.model_validate(scene_data())


@pytest.fixture
def empty_estimate() -> SceneEstimate:
    """Nothing on the table, both grippers open at home."""
    return SceneEstimate(
        perception=PerceptionOutput(step=0, objects={}),
        robot=RobotState(
            grippers={
                "left": GripperReading(Pose.create(LEFT_HOME, TOP_DOWN_QUAT), 0.09, False),
                "right": GripperReading(Pose.create(RIGHT_HOME, TOP_DOWN_QUAT), 0.09, False),
            }
        ),
    )
