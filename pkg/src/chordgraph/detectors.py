# src/chordgraph/detectors.py
"""Detector templates: constraint and failure functions over a feature vector.

Every template evaluates to a scalar where ``<= 0`` means normal execution and a
positive value means violation. The same templates serve as sub-goal constraints,
path constraints and failure detectors.
"""

from __future__ import annotations

import ast
from functools import lru_cache
import logging
import math
from typing import Annotated, Any, Callable, Literal, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from chordgraph.config import MonitorDefaults
from chordgraph.exceptions import MissingFeatureError
from chordgraph.features import (
    FEATURE_FAMILIES,
    FeatureValue,
    FeatureVector,
    parse_feature_key,
)

logger = logging.getLogger(__name__)

Vec3 = tuple[float, float, float]


class _Template(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    # Trigger settings; only consulted when the template is used as a failure detector.
    epsilon: float | None = Field(default=None, ge=0.0)
    k: int | None = Field(default=None, ge=1)

    def required_keys(self) -> tuple[str, ...]:
        raise NotImplementedError

    def evaluate(self, z: FeatureVector) -> float:
        raise NotImplementedError

    def with_defaults(self, defaults: MonitorDefaults) -> "_Template":
        return self

    def subjects(self) -> tuple[str, ...]:
        """Object ids read by this template."""
        objects: list[str] = []
        for key in self.required_keys():
            objects.extend(parse_feature_key(key).objects)
        return tuple(dict.fromkeys(objects))


def _vector(z: FeatureVector, key: str) -> np.ndarray:
    return np.asarray(z[key], dtype=float)


class ShiftTemplate(_Template):
    """Object pose drift: ``||p - p_ref|| - delta_shift``."""

    template: Literal["shift"] = "shift"
    object: str
    reference: Vec3 | None = None
    delta_shift: float | None = Field(default=None, gt=0.0)

    def required_keys(self) -> tuple[str, ...]:
        return (f"centroid({self.object})",)

    def with_defaults(self, defaults: MonitorDefaults) -> "ShiftTemplate":
        if self.delta_shift is not None:
            return self
        return self.model_copy(update={"delta_shift": defaults.delta_shift})

    def evaluate(self, z: FeatureVector) -> float:
        if self.reference is None:
            raise ValueError(f"Shift template on {self.object!r} has no reference position")
        p = _vector(z, f"centroid({self.object})")
        return float(np.linalg.norm(p - np.asarray(self.reference))) - _req(self.delta_shift)


class TiltTemplate(_Template):
    """Uprightness: ``arccos(|u . g|) - theta_max`` with u the principal axis."""

    template: Literal["tilt"] = "tilt"
    object: str
    theta_max: float | None = Field(default=None, gt=0.0)

    def required_keys(self) -> tuple[str, ...]:
        return (f"principal_axis({self.object})", "gravity_dir")

    def with_defaults(self, defaults: MonitorDefaults) -> "TiltTemplate":
        if self.theta_max is not None:
            return self
        return self.model_copy(update={"theta_max": defaults.theta_max})

    def evaluate(self, z: FeatureVector) -> float:
        u = _vector(z, f"principal_axis({self.object})")
        g = _vector(z, "gravity_dir")
        cos = min(1.0, abs(float(u @ g)))
        return math.acos(cos) - _req(self.theta_max)


class GraspOpeningTemplate(_Template):
    """Gripper opening against a threshold: ``g - g_th``."""

    template: Literal["grasp_opening"] = "grasp_opening"
    arm: Literal["left", "right"]
    g_th: float = Field(gt=0.0)

    def required_keys(self) -> tuple[str, ...]:
        return (f"gripper_width({self.arm})",)

    def evaluate(self, z: FeatureVector) -> float:
        return float(z[f"gripper_width({self.arm})"]) - self.g_th


class AttachTemplate(_Template):
    """Slipped grasp: ``||p - p_grip|| - delta_attach``."""

    template: Literal["attach"] = "attach"
    object: str
    arm: Literal["left", "right"]
    delta_attach: float | None = Field(default=None, gt=0.0)

    def required_keys(self) -> tuple[str, ...]:
        return (f"centroid({self.object})", f"gripper_origin({self.arm})")

    def with_defaults(self, defaults: MonitorDefaults) -> "AttachTemplate":
        if self.delta_attach is not None:
            return self
        return self.model_copy(update={"delta_attach": defaults.delta_attach})

    def evaluate(self, z: FeatureVector) -> float:
        p = _vector(z, f"centroid({self.object})")
        grip = _vector(z, f"gripper_origin({self.arm})")
        return float(np.linalg.norm(p - grip)) - _req(self.delta_attach)


class VisibilityTemplate(_Template):
    """Tracking loss: ``N_min - N``; an absent cloud counts as zero points."""

    template: Literal["visibility"] = "visibility"
    object: str
    n_min: int | None = Field(default=None, ge=1)

    def required_keys(self) -> tuple[str, ...]:
        return (f"point_count({self.object})",)

    def with_defaults(self, defaults: MonitorDefaults) -> "VisibilityTemplate":
        if self.n_min is not None:
            return self
        return self.model_copy(update={"n_min": defaults.n_min})

    def evaluate(self, z: FeatureVector) -> float:
        key = f"point_count({self.object})"
        try:
            count = float(z[key])
        except MissingFeatureError:
            count = 0.0
        return float(_req(self.n_min)) - count


_RELATION_FAMILY = {
    "lateral-offset": "lateral_offset",
    "centroid-distance": "relative_distance",
    "height-difference": "height_difference",
}


class RelationalTemplate(_Template):
    """Relational misalignment: ``|measure - target| - delta_rel``.

    Either entity may be ``gripper:<arm>`` to relate an object to an end effector.
    """

    template: Literal["relational"] = "relational"
    objects: tuple[str, str]
    relation: Literal["lateral-offset", "centroid-distance", "height-difference"]
    delta_rel: float | None = Field(default=None, gt=0.0)
    target: float = 0.0

    def _key(self) -> str:
        return f"{_RELATION_FAMILY[self.relation]}({self.objects[0]},{self.objects[1]})"

    def required_keys(self) -> tuple[str, ...]:
        return (self._key(),)

    def with_defaults(self, defaults: MonitorDefaults) -> "RelationalTemplate":
        if self.delta_rel is not None:
            return self
        return self.model_copy(update={"delta_rel": defaults.delta_rel})

    def evaluate(self, z: FeatureVector) -> float:
        measure = float(z[self._key()])
        return abs(measure - self.target) - _req(self.delta_rel)


# ---------------------------------------------------------------------------
# Expr: closed arithmetic language over feature keys
# ---------------------------------------------------------------------------

Program = Callable[[FeatureVector], FeatureValue]

_MATH: dict[str, tuple[int, int, Callable[..., Any]]] = {
    "norm": (1, 1, lambda v: float(np.linalg.norm(v))),
    "dot": (2, 2, lambda a, b: float(np.dot(a, b))),
    "arccos": (1, 1, lambda v: math.acos(max(-1.0, min(1.0, float(v))))),
    "abs": (1, 1, lambda v: np.abs(v) if isinstance(v, np.ndarray) else abs(v)),
    "min": (2, 8, lambda *a: min(float(x) for x in a)),
    "max": (2, 8, lambda *a: max(float(x) for x in a)),
}

_BINARY: dict[type[ast.operator], Callable[[Any, Any], Any]] = {
    ast.Add: lambda a, b: a + b,
    ast.Sub: lambda a, b: a - b,
    ast.Mult: lambda a, b: a * b,
}


def _feature_arg(node: ast.expr, source: str) -> str:
    if isinstance(node, ast.Name):
        return node.id
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float, str)):
        return str(node.value)
    raise ValueError(f"Unsupported feature argument in expression {source!r}")


@lru_cache(maxsize=1024)
def compile_expr(source: str) -> tuple[Program, tuple[str, ...]]:
    """Compile an expression to a callable plus the feature keys it reads.

    Raises:
        ValueError: the expression uses anything outside the closed language.
    """
    try:
        tree = ast.parse(source, mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"Invalid expression {source!r}: {exc.msg}") from exc
    keys: list[str] = []

    def build(node: ast.expr) -> Program:
        if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)):
            value = float(node.value)
            return lambda z: value
        if isinstance(node, ast.List):
            items = [build(elt) for elt in node.elts]
            return lambda z: np.array([float(item(z)) for item in items])
        if isinstance(node, ast.Name):
            if node.id in FEATURE_FAMILIES and not FEATURE_FAMILIES[node.id]:
                key = str(parse_feature_key(node.id))
                keys.append(key)
                return lambda z: z[key]
            raise ValueError(f"Unknown name {node.id!r} in expression {source!r}")
        if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
            operand = build(node.operand)
            sign = -1.0 if isinstance(node.op, ast.USub) else 1.0
            return lambda z: sign * operand(z)
        if isinstance(node, ast.BinOp) and type(node.op) in _BINARY:
            left, right = build(node.left), build(node.right)
            op = _BINARY[type(node.op)]
            return lambda z: op(left(z), right(z))
        if isinstance(node, ast.Subscript):
            index = node.slice
            if not (isinstance(index, ast.Constant) and isinstance(index.value, int)):
                raise ValueError(f"Only constant integer indexing is allowed in {source!r}")
            target, position = build(node.value), index.value
            return lambda z: float(np.asarray(target(z))[position])
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) and not node.keywords:
            name = node.func.id
            if name in _MATH:
                low, high, fn = _MATH[name]
                if not low <= len(node.args) <= high:
                    raise ValueError(f"{name}() takes {low}..{high} arguments in {source!r}")
                args = [build(a) for a in node.args]
                return lambda z: fn(*(a(z) for a in args))
            if name in FEATURE_FAMILIES:
                raw = ",".join(_feature_arg(a, source) for a in node.args)
                key = str(parse_feature_key(f"{name}({raw})"))
                keys.append(key)
                return lambda z: z[key]
            raise ValueError(f"Unknown function {name!r} in expression {source!r}")
        raise ValueError(f"Unsupported syntax {type(node).__name__} in expression {source!r}")

    program = build(tree.body)
    return program, tuple(dict.fromkeys(keys))


class ExprTemplate(_Template):
    """Escape hatch: an arithmetic expression over feature keys, e.g.
    ``"1 - gripper_closed(right)"`` or ``"norm(gripper_origin(left) - [0.4, 0.0, 0.3]) - 0.001"``.
    """

    template: Literal["expr"] = "expr"
    expr: str

    @model_validator(mode="after")
    def _compile(self) -> "ExprTemplate":
        compile_expr(self.expr)
        return self

    def required_keys(self) -> tuple[str, ...]:
        return compile_expr(self.expr)[1]

    def evaluate(self, z: FeatureVector) -> float:
        value = compile_expr(self.expr)[0](z)
        array = np.asarray(value, dtype=float)
        if array.size != 1:
            raise ValueError(f"Expression {self.expr!r} did not evaluate to a scalar")
        return float(array.reshape(-1)[0])


DetectorTemplate = Annotated[
    Union[
        ShiftTemplate,
        TiltTemplate,
        GraspOpeningTemplate,
        AttachTemplate,
        VisibilityTemplate,
        RelationalTemplate,
        ExprTemplate,
    ],
    Field(discriminator="template"),
]
"""A detector template with its parameters."""

ConstraintSpec = DetectorTemplate

TEMPLATE_NAMES = ("shift", "tilt", "grasp_opening", "attach", "visibility", "relational", "expr")


def _req(value: float | int | None) -> float:
    if value is None:
        raise ValueError("Threshold not resolved; apply monitor defaults first")
    return float(value)


def eval_detector(template: _Template, z: FeatureVector) -> float:
    """Evaluate a template on ``z``; positive means violation.

    Raises:
        MissingFeatureError: a non-visibility template needs an absent feature.
    """
    return template.evaluate(z)


def required_keys(templates: "list[Any] | tuple[Any, ...]") -> set[str]:
    keys: set[str] = set()
    for template in templates:
        keys.update(template.required_keys())
    return keys
