from __future__ import annotations

from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field, field_validator

SUPPORTED_DOWNSAMPLE_FACTORS = (1, 2, 4, 8, 16, 32)


class HeatmapCombine(StrEnum):
    SUM_CLAMPED = "sum_clamped"
    MAX = "max"


class EncoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    f_d: int = 8
    sigma_heat: float = Field(default=7.0, gt=0)
    limb_halfwidth: float = Field(default=1.0, gt=0)
    offset_validity: float = Field(default=0.4, gt=0, lt=1)
    heatmap_combine: HeatmapCombine = HeatmapCombine.SUM_CLAMPED

    @field_validator("f_d")
    @classmethod
    def _supported_factor(cls, value: int) -> int:
        if value not in SUPPORTED_DOWNSAMPLE_FACTORS:
            raise ValueError(f"unsupported downsample factor {value}; expected one of {SUPPORTED_DOWNSAMPLE_FACTORS}")
        return value
