from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

OKS_THRESHOLDS = tuple(round(0.5 + 0.05 * step, 2) for step in range(10))
RECALL_THRESHOLDS = np.linspace(0.0, 1.0, 101)
AREA_BANDS: dict[str, tuple[float, float]] = {
    "all": (0.0, float("inf")),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, float("inf")),
}
MAX_DETECTIONS = 20


@dataclass
class PrecisionRecallCurve:
    threshold: float
    recall: np.ndarray
    precision: np.ndarray


@dataclass
class EvalResult:
    ap: float
    ap50: float
    ap75: float
    ap_m: float | None
    ap_l: float | None
    ar: float
    ar50: float
    ar75: float
    ar_m: float | None
    ar_l: float | None
    per_threshold_ap: dict[float, float] = field(default_factory=dict)
    pr_curves: list[PrecisionRecallCurve] = field(default_factory=list)
    num_images: int = 0
    num_gt: int = 0
    num_detections: int = 0

    def summary(self) -> dict:
        return {
            "AP": self.ap,
            "AP50": self.ap50,
            "AP75": self.ap75,
            "AP_M": self.ap_m,
            "AP_L": self.ap_l,
            "AR": self.ar,
            "AR50": self.ar50,
            "AR75": self.ar75,
            "AR_M": self.ar_m,
            "AR_L": self.ar_l,
            "per_threshold_ap": {f"{threshold:.2f}": value for threshold, value in self.per_threshold_ap.items()},
            "num_images": self.num_images,
            "num_gt": self.num_gt,
            "num_detections": self.num_detections,
        }
