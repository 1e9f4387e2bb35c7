from __future__ import annotations

from dataclasses import dataclass
from enum import StrEnum

from pydantic import BaseModel, ConfigDict, Field

PRNG_ALGORITHM = "numpy-pcg64"


class CorruptionKind(StrEnum):
    GAUSSIAN_NOISE = "gaussian_noise"
    MIRROR_SWAP = "mirror_swap"
    DROPOUT = "dropout"


class Corruption(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: CorruptionKind
    sigma: float = Field(default=0.0, ge=0)
    channels: tuple[tuple[int, int], ...] = ()
    p: float = Field(default=0.0, ge=0, le=1)


class UpsampleKernel(StrEnum):
    NEAREST = "nearest"
    BILINEAR = "bilinear"
    BICUBIC = "bicubic"
    RIE = "rie"


@dataclass(frozen=True)
class BenchResult:
    f_d: int
    kernel: str
    trials: int
    mean_px: float
    p95_px: float
    seed: int
    prng: str = PRNG_ALGORITHM

    def as_row(self) -> dict:
        return {
            "f_d": self.f_d,
            "kernel": self.kernel,
            "trials": self.trials,
            "mean_px": f"{self.mean_px:.6f}",
            "p95_px": f"{self.p95_px:.6f}",
            "seed": self.seed,
            "prng": self.prng,
        }
