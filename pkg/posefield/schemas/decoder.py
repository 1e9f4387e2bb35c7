from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field


class Matcher(StrEnum):
    GREEDY = "greedy"
    EXACT = "exact"


class DecoderConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    peak_threshold: float = Field(default=0.1, ge=0)
    num_samples: int = Field(default=10, ge=2)
    bias_threshold: float = Field(default=0.5, gt=0)
    min_aligned_fraction: float = Field(default=0.8, ge=0, le=1)
    matcher: Matcher = Matcher.GREEDY
    use_offsets: bool = True
    bilinear_pafs: bool = False


@dataclass(frozen=True)
class JointCandidate:
    joint_type: int
    cell: tuple[int, int]
    score: float
    refined_position: tuple[float, float]


@dataclass(frozen=True)
class ConnectionCandidate:
    limb_type: int
    parent: JointCandidate
    child: JointCandidate
    score: int
    direction: tuple[float, float]
    length: float


@dataclass(frozen=True)
class DecodedPose:
    """One assembled person; ``joints[c]`` is (x, y, confidence) or None."""

    joints: tuple[tuple[float, float, float] | None, ...]
    score: float
    members: tuple[JointCandidate, ...] = ()

    @property
    def joint_count(self) -> int:
        return sum(1 for joint in self.joints if joint is not None)

    def bbox_area(self) -> float:
        points = [joint for joint in self.joints if joint is not None]
        if not points:
            return 0.0
        xs = [x for x, _, _ in points]
        ys = [y for _, y, _ in points]
        return (max(xs) - min(xs)) * (max(ys) - min(ys))
