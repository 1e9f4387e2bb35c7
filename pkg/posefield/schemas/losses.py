from __future__ import annotations

from dataclasses import dataclass, field
from enum import StrEnum

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator


class PddScheduleKind(StrEnum):
    LINEAR = "linear"
    QUADRATIC_A = "quadratic_a"
    QUADRATIC_B = "quadratic_b"


# Canonical six-stage curves; other stage counts interpolate these.
PDD_SCHEDULES: dict[PddScheduleKind, tuple[float, ...]] = {
    PddScheduleKind.LINEAR: (0.0, 0.2, 0.4, 0.6, 0.8, 1.0),
    PddScheduleKind.QUADRATIC_A: (0.00, 0.45, 0.69, 0.85, 0.95, 1.00),
    PddScheduleKind.QUADRATIC_B: (0.00, 0.05, 0.15, 0.31, 0.65, 1.00),
}


class SalmProfile(StrEnum):
    GAUSSIAN = "gaussian"
    RAMP = "ramp"


class SelfSupervisionMode(StrEnum):
    """Which KL direction ties the two heatmap predictions together."""

    P2H = "p2h"
    H2P = "h2p"
    BOTH = "both"


class LossConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    gamma: float = Field(default=9.0, ge=0)
    delta: float | None = None
    alpha: float = Field(default=10.0, ge=0)
    beta_schedule: tuple[float, ...] = PDD_SCHEDULES[PddScheduleKind.QUADRATIC_B]
    kl_epsilon: float = Field(default=1e-8, gt=0)
    offset_mask_threshold: float = 0.4
    pdd_high: float = 0.4
    pdd_low: float = 0.4
    salm_profile: SalmProfile = SalmProfile.GAUSSIAN
    self_supervision: bool = True
    self_supervision_mode: SelfSupervisionMode = SelfSupervisionMode.P2H

    @model_validator(mode="before")
    @classmethod
    def _default_delta(cls, data):
        if isinstance(data, dict) and data.get("delta") is None:
            data = dict(data)
            data["delta"] = float(data.get("gamma", 9.0)) + 1.0
        return data

    @model_validator(mode="after")
    def _check_weights(self) -> "LossConfig":
        if self.delta is None or abs(self.delta - (self.gamma + 1.0)) > 1e-12:
            raise ValueError(f"delta must equal gamma + 1 ({self.gamma + 1.0}), got {self.delta}")
        schedule = self.beta_schedule
        if not schedule:
            raise ValueError("beta_schedule needs at least one stage")
        if any(not 0.0 <= beta <= 1.0 for beta in schedule):
            raise ValueError("beta_schedule values must lie in [0, 1]")
        if any(later < earlier for earlier, later in zip(schedule, schedule[1:])):
            raise ValueError("beta_schedule must be nondecreasing")
        if schedule[-1] != 1.0:
            raise ValueError("beta_schedule must end at 1.0")
        return self

    @property
    def num_stages(self) -> int:
        return len(self.beta_schedule)


@dataclass
class SelfSupervisionPair:
    """Network heatmaps F_s and the heatmaps F_ps predicted from the PAF branch."""

    f_s: np.ndarray
    f_ps: np.ndarray


@dataclass
class StagePrediction:
    heatmaps: np.ndarray
    pafs: np.ndarray
    offsets: np.ndarray
    ps_heatmaps: np.ndarray | None = None


LOSS_TERMS = ("L_s", "L_m", "L_n", "L_x", "L_y", "L_ps", "L_kl")


@dataclass
class LossReport:
    total: float
    per_term: dict[str, float]
    per_stage: list[float]
    gradients: list[dict[str, np.ndarray]] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "total": self.total,
            "per_term": dict(self.per_term),
            "per_stage": list(self.per_stage),
            "gradient_norms": [
                {name: float(np.linalg.norm(grad)) for name, grad in stage.items()} for stage in self.gradients
            ],
        }
