# tests/test_detectors.py
from __future__ import annotations

import math

import numpy as np
from pydantic import TypeAdapter, ValidationError
import pytest

from chordgraph.config import MonitorDefaults
from chordgraph.detectors import (
    AttachTemplate,
    DetectorTemplate,
    ExprTemplate,
    GraspOpeningTemplate,
    RelationalTemplate,
    ShiftTemplate,
    TiltTemplate,
    VisibilityTemplate,
    compile_expr,
    eval_detector,
    required_keys,
)
from chordgraph.exceptions import MissingFeatureError
from chordgraph.features import FeatureVector

DEFAULTS = MonitorDefaults()


class TestGeometricTemplates:
    """Tests for the fixed detector templates."""

    def test_shift_sign(self) -> None:
        """Test shift below and above the threshold."""
        template = ShiftTemplate(object="cup", reference=(0.4, 0.0, 0.05)).with_defaults(DEFAULTS)
        z_near = FeatureVector(values={"centroid(cup)": np.array([0.42, 0.0, 0.05])})
        z_far = FeatureVector(values={"centroid(cup)": np.array([0.5, 0.0, 0.05])})
        assert eval_detector(template, z_near) == pytest.approx(0.02 - 0.05)
        assert eval_detector(template, z_far) == pytest.approx(0.1 - 0.05)

    def test_shift_without_reference(self) -> None:
        """Test that a shift template needs a reference position."""
        template = ShiftTemplate(object="cup").with_defaults(DEFAULTS)
        z = FeatureVector(values={"centroid(cup)": np.zeros(3)})
        with pytest.raises(ValueError, match="no reference"):
            template.evaluate(z)

    def test_tilt_ignores_axis_sign(self) -> None:
        """Test that an axis pointing up or down is equally upright."""
        template = TiltTemplate(object="bottle", theta_max=0.3)
        g = np.array([0.0, 0.0, -1.0])
        for axis in ([0.0, 0.0, 1.0], [0.0, 0.0, -1.0]):
            z = FeatureVector(
                values={"principal_axis(bottle)": np.array(axis), "gravity_dir": g}
            )
            assert template.evaluate(z) == pytest.approx(-0.3)
        lying = FeatureVector(
            values={"principal_axis(bottle)": np.array([1.0, 0.0, 0.0]), "gravity_dir": g}
        )
        assert template.evaluate(lying) == pytest.approx(math.pi / 2 - 0.3)

    def test_grasp_opening(self) -> None:
        """Test gripper opening against its threshold."""
        template = GraspOpeningTemplate(arm="left", g_th=0.01)
        assert template.evaluate(FeatureVector(values={"gripper_width(left)": 0.03})) > 0
        assert template.evaluate(FeatureVector(values={"gripper_width(left)": 0.005})) < 0

    def test_attach(self) -> None:
        """Test the slipped-grasp distance."""
        template = AttachTemplate(object="bottle", arm="right").with_defaults(DEFAULTS)
        z = FeatureVector(
            values={
                "centroid(bottle)": np.array([0.4, 0.0, 0.1]),
                "gripper_origin(right)": np.array([0.4, 0.0, 0.3]),
            }
        )
        assert template.evaluate(z) == pytest.approx(0.2 - DEFAULTS.delta_attach)

    def test_visibility_counts_missing_as_zero(self) -> None:
        """Test that an absent cloud is treated as zero points."""
        template = VisibilityTemplate(object="cup").with_defaults(DEFAULTS)
        missing = FeatureVector(missing=frozenset({"point_count(cup)"}))
        assert template.evaluate(missing) == pytest.approx(DEFAULTS.n_min)
        seen = FeatureVector(values={"point_count(cup)": 120.0})
        assert template.evaluate(seen) < 0

    def test_relational_target(self) -> None:
        """Test absolute deviation from a relational target."""
        template = RelationalTemplate(
            objects=("bottle", "cup"), relation="height-difference", target=0.1, delta_rel=0.02
        )
        assert template.required_keys() == ("height_difference(bottle,cup)",)
        z = FeatureVector(values={"height_difference(bottle,cup)": 0.0})
        assert template.evaluate(z) == pytest.approx(0.08)

    def test_missing_feature_propagates(self) -> None:
        """Test that non-visibility templates raise on missing features."""
        template = AttachTemplate(object="bottle", arm="left", delta_attach=0.05)
        with pytest.raises(MissingFeatureError):
            template.evaluate(FeatureVector(missing=frozenset({"centroid(bottle)"})))

    def test_unresolved_threshold(self) -> None:
        """Test that thresholds must be resolved before evaluation."""
        template = TiltTemplate(object="bottle")
        z = FeatureVector(
            values={"principal_axis(bottle)": np.array([0, 0, 1.0]), "gravity_dir": np.zeros(3)}
        )
        with pytest.raises(ValueError, match="Threshold not resolved"):
            template.evaluate(z)

    def test_explicit_threshold_survives_defaults(self) -> None:
        """Test that with_defaults() keeps explicitly set thresholds."""
        template = ShiftTemplate(object="cup", delta_shift=0.2)
        assert template.with_defaults(DEFAULTS).delta_shift == 0.2


class TestExprTemplate:
    """Tests for the arithmetic expression language."""

    def test_expression_evaluates(self) -> None:
        """Test vector arithmetic, literals and math functions."""
        template = ExprTemplate(expr="norm(gripper_origin(left) - [0.4, 0.0, 0.3]) - 0.001")
        z = FeatureVector(values={"gripper_origin(left)": np.array([0.4, 0.0, 0.3])})
        assert template.evaluate(z) == pytest.approx(-0.001)
        assert template.required_keys() == ("gripper_origin(left)",)

    def test_indexing_and_unary(self) -> None:
        """Test constant indexing and unary minus."""
        template = ExprTemplate(expr="-centroid(cup)[2] + 0.1")
        z = FeatureVector(values={"centroid(cup)": np.array([0.0, 0.0, 0.04])})
        assert template.evaluate(z) == pytest.approx(0.06)

    def test_feature_args_with_alpha(self) -> None:
        """Test that numeric feature arguments are canonicalized."""
        _, keys = compile_expr("fractional_point(bottle, 0.5)[2]")
        assert keys == ("fractional_point(bottle,0.5)",)

    def test_gravity_name(self) -> None:
        """Test that argumentless features are usable as bare names."""
        template = ExprTemplate(expr="dot(gravity_dir, upright_axis(cup)) + 0.9")
        z = FeatureVector(
            values={
                "gravity_dir": np.array([0, 0, -1.0]),
                "upright_axis(cup)": np.array([0, 0, 1.0]),
            }
        )
        assert template.evaluate(z) == pytest.approx(-0.1)

    @pytest.mark.parametrize(
        "expr",
        [
            "__import__('os')",
            "centroid(cup).sum()",
            "centroid(cup)[i]",
            "bottle + 1",
            "norm()",
            "1 ** 2",
            "1 / 2",
            "norm(centroid(cup)) / 0",
            "centroid(cup) if 1 else 0",
            "1 +",
        ],
    )
    def test_rejects_outside_language(self, expr: str) -> None:
        """Test that anything outside the closed language fails validation."""
        with pytest.raises(ValidationError):
            ExprTemplate(expr=expr)

    def test_vector_result_rejected(self) -> None:
        """Test that a vector-valued expression cannot be a detector."""
        template = ExprTemplate(expr="centroid(cup)")
        z = FeatureVector(values={"centroid(cup)": np.zeros(3)})
        with pytest.raises(ValueError, match="scalar"):
            template.evaluate(z)


class TestDiscriminatedUnion:
    """Tests for template parsing through the tagged union."""

    def test_parse_by_tag(self) -> None:
        """Test that the template tag selects the model."""
        adapter = TypeAdapter(DetectorTemplate)
        data = {"template": "attach", "object": "bottle", "arm": "left"}
        template = adapter.validate_python(data)
        assert isinstance(template, AttachTemplate)

    def test_unknown_tag(self) -> None:
        """Test that an unknown tag is rejected."""
        with pytest.raises(ValidationError):
            TypeAdapter(DetectorTemplate).validate_python({"template": "wobble", "object": "x"})

    def test_required_keys_union(self) -> None:
        """Test collecting the feature keys of several templates."""
        keys = required_keys(
            [
                VisibilityTemplate(object="cup"),
                AttachTemplate(object="bottle", arm="right"),
            ]
        )
        assert keys == {"point_count(cup)", "centroid(bottle)", "gripper_origin(right)"}

    def test_subjects(self) -> None:
        """Test that subjects() lists object ids and skips grippers."""
        template = RelationalTemplate(objects=("gripper:left", "cup"), relation="lateral-offset")
        assert template.subjects() == ("cup",)
