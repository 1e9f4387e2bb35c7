from __future__ import annotations

from enum import StrEnum


class WorkerJobType(StrEnum):
    ENCODE = "encode"
    DECODE = "decode"
    VIZ = "viz"
    BENCH = "bench"
