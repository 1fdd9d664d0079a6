# src/chordgraph/config.py
"""Configuration blocks shared by task files, experiment files and the CLI.

Every block is a frozen pydantic model with documented defaults. Task files may
override any block; experiment files and CLI flags override again, last one wins.
"""

from __future__ import annotations

import logging
from typing import Any

from pydantic import BaseModel, ConfigDict, Field, model_validator

logger = logging.getLogger(__name__)

DEFAULT_DT = 0.1
"""Seconds per control step (10 Hz sensing)."""

MAX_GRIPPER_OPENING = 0.10


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    def merged(self, overrides: dict[str, Any] | None) -> Any:
        """Return a copy with ``overrides`` applied and re-validated."""
        if not overrides:
            return self
        data = self.model_dump()
        data.update(overrides)
        return type(self).model_validate(data)


class NoiseConfig(_Block):
    """Observation noise of the simulated perception oracle."""

    sigma: float = Field(default=0.002, ge=0.0, description="Isotropic point noise (m).")
    dropout: float = Field(default=0.0, ge=0.0, le=1.0, description="Per-point drop prob.")
    orientation_sigma: float = Field(
        default=0.0, ge=0.0, description="Noise on the reported object orientation (rad)."
    )


class MonitorDefaults(_Block):
    """Shared detector thresholds, overridable per failure mode."""

    epsilon: float = Field(default=0.0, ge=0.0)
    k: int = Field(default=3, ge=1)
    delta_shift: float = Field(default=0.05, gt=0.0)
    theta_max: float = Field(default=0.35, gt=0.0)
    delta_attach: float = Field(default=0.08, gt=0.0)
    n_min: int = Field(default=20, ge=1)
    delta_rel: float = Field(default=0.04, gt=0.0)


class SolverWeights(_Block):
    collision: float = Field(default=50.0, ge=0.0)
    reachability: float = Field(default=50.0, ge=0.0)
    regularization: float = Field(default=0.01, ge=0.0)
    consistency: float = Field(default=0.01, ge=0.0)
    bimanual: float = Field(default=10.0, ge=0.0)
    smoothness: float = Field(default=0.1, ge=0.0)
    progress: float = Field(default=1.0, ge=0.0)


class SolverConfig(_Block):
    """Sub-goal and path solver settings."""

    restarts: int = Field(default=32, ge=1)
    refine: int = Field(default=4, ge=1, description="Global candidates passed to refinement.")
    horizon: int = Field(default=20, ge=1)
    execute: int = Field(default=5, ge=1)
    max_translation: float = Field(default=0.02, gt=0.0)
    max_rotation: float = Field(default=0.1, gt=0.0)
    safety_margin: float = Field(default=0.01, ge=0.0)
    voxel: float = Field(default=0.01, gt=0.0)
    tol: float = Field(default=1e-3, gt=0.0)
    penalty_schedule: tuple[float, ...] = (10.0, 1e2, 1e3, 1e4, 1e5, 1e6)
    max_iterations: int = Field(default=200, ge=1)
    wrist_bounds: tuple[float, float] = (0.1, 1.0)
    weights: SolverWeights = SolverWeights()

    @model_validator(mode="after")
    def _check_horizon(self) -> "SolverConfig":
        if self.execute > self.horizon:
            raise ValueError("execute (M) must not exceed horizon (H)")
        low, high = self.wrist_bounds
        if not 0.0 <= low < high:
            raise ValueError("wrist_bounds must satisfy 0 <= low < high")
        return self


class ExecutorConfig(_Block):
    """Episode-level limits and the planner latency model."""

    dt: float = Field(default=DEFAULT_DT, gt=0.0)
    planner_latency: float = Field(default=5.0, ge=0.0)
    step_budget: int = Field(default=3000, ge=1)
    switch_cap: int = Field(default=10, ge=0)
    consecutive_cap: int = Field(default=3, ge=1)
    subgoal_tol: float = Field(default=0.0, ge=0.0)


class ResolvedConfig(_Block):
    """Everything an episode needs, echoed verbatim in the trace header."""

    noise: NoiseConfig = NoiseConfig()
    monitors: MonitorDefaults = MonitorDefaults()
    solver: SolverConfig = SolverConfig()
    executor: ExecutorConfig = ExecutorConfig()
