from __future__ import annotations

import csv
import io
import json
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass

import numpy as np

from posefield.core.errors import AnnotationReferenceError
from posefield.schemas.decoder import DecodedPose
from posefield.schemas.evaluation import (
    AREA_BANDS,
    MAX_DETECTIONS,
    OKS_THRESHOLDS,
    RECALL_THRESHOLDS,
    EvalResult,
    PrecisionRecallCurve,
)
from posefield.schemas.skeleton import PoseInstance, Scene, SkeletonSpec

logger = logging.getLogger(__name__)

MIN_AREA = 1.0


@dataclass
class _ImageMatches:
    """Per-image matching outcome for one area band, indexed [threshold, detection]."""

    scores: np.ndarray
    matched: np.ndarray
    ignored: np.ndarray
    num_gt: int


def _in_band(area: float, band: tuple[float, float]) -> bool:
    low, high = band
    if low <= 0.0:
        return area <= high
    return low < area <= high


class EvaluationService:
    def gt_area(self, person: PoseInstance, area: float | None) -> float:
        if area is not None:
            return float(area)
        return max(person.bbox_area(), MIN_AREA)

    def oks(self, gt: PoseInstance, area: float, dt: DecodedPose, spec: SkeletonSpec) -> float:
        """COCO object keypoint similarity; joints the detection lacks contribute 0."""
        if area <= 0:
            raise ValueError(f"OKS needs a positive area, got {area}")
        labeled = [index for index, joint in enumerate(gt.joints) if joint is not None]
        if not labeled:
            raise ValueError("OKS is undefined for a ground truth without labeled joints")
        total = 0.0
        for index in labeled:
            guess = dt.joints[index]
            if guess is None:
                continue
            truth = gt.joints[index]
            distance_sq = (guess[0] - truth.x) ** 2 + (guess[1] - truth.y) ** 2
            kappa = spec.oks_kappa[index]
            total += float(np.exp(-distance_sq / (2.0 * area * kappa * kappa)))
        return total / len(labeled)

    def _oks_matrix(
        self, detections: Sequence[DecodedPose], gts: Sequence[tuple[PoseInstance, float]], spec: SkeletonSpec
    ) -> np.ndarray:
        matrix = np.zeros((len(detections), len(gts)))
        for row, detection in enumerate(detections):
            for col, (person, area) in enumerate(gts):
                matrix[row, col] = self.oks(person, area, detection, spec)
        return matrix

    def _match_image(
        self,
        detections: Sequence[DecodedPose],
        gts: Sequence[tuple[PoseInstance, float]],
        oks_matrix: np.ndarray,
        band: tuple[float, float],
    ) -> _ImageMatches:
        gt_ignored = np.array([not _in_band(area, band) for _, area in gts], dtype=bool)
        order = np.argsort(gt_ignored, kind="mergesort")
        gt_ignored = gt_ignored[order]
        ious = oks_matrix[:, order] if oks_matrix.size else oks_matrix

        num_thresholds = len(OKS_THRESHOLDS)
        matched = np.zeros((num_thresholds, len(detections)), dtype=bool)
        ignored = np.zeros((num_thresholds, len(detections)), dtype=bool)
        for t_index, threshold in enumerate(OKS_THRESHOLDS):
            gt_taken = np.zeros(len(gts), dtype=bool)
            for d_index in range(len(detections)):
                best_oks = min(threshold, 1.0 - 1e-10)
                match = -1
                for g_index in range(len(gts)):
                    if gt_taken[g_index]:
                        continue
                    if match > -1 and not gt_ignored[match] and gt_ignored[g_index]:
                        break
                    if ious[d_index, g_index] < best_oks:
                        continue
                    best_oks = ious[d_index, g_index]
                    match = g_index
                if match == -1:
                    continue
                gt_taken[match] = True
                matched[t_index, d_index] = True
                ignored[t_index, d_index] = gt_ignored[match]

            outside = np.array([not _in_band(max(d.bbox_area(), 0.0), band) for d in detections], dtype=bool)
            ignored[t_index] |= ~matched[t_index] & outside

        return _ImageMatches(
            scores=np.array([detection.score for detection in detections], dtype=np.float64),
            matched=matched,
            ignored=ignored,
            num_gt=int(np.count_nonzero(~gt_ignored)),
        )

    @staticmethod
    def _accumulate(images: Sequence[_ImageMatches]) -> tuple[list[float], list[float], list[np.ndarray], int] | None:
        num_gt = sum(image.num_gt for image in images)
        if num_gt == 0:
            return None
        scores = np.concatenate([image.scores for image in images]) if images else np.zeros(0)
        order = np.argsort(-scores, kind="mergesort")
        matched = np.concatenate([image.matched for image in images], axis=1)[:, order]
        ignored = np.concatenate([image.ignored for image in images], axis=1)[:, order]

        aps: list[float] = []
        recalls: list[float] = []
        curves: list[np.ndarray] = []
        for t_index in range(len(OKS_THRESHOLDS)):
            keep = ~ignored[t_index]
            true_positive = np.cumsum(matched[t_index][keep]).astype(np.float64)
            false_positive = np.cumsum(~matched[t_index][keep]).astype(np.float64)
            interpolated = np.zeros(len(RECALL_THRESHOLDS))
            if true_positive.size:
                recall = true_positive / num_gt
                precision = true_positive / np.maximum(true_positive + false_positive, np.spacing(1))
                precision = np.maximum.accumulate(precision[::-1])[::-1]
                indices = np.searchsorted(recall, RECALL_THRESHOLDS, side="left")
                valid = indices < len(recall)
                interpolated[valid] = precision[indices[valid]]
                recalls.append(float(recall[-1]))
            else:
                recalls.append(0.0)
            aps.append(float(interpolated.mean()))
            curves.append(interpolated)
        return aps, recalls, curves, num_gt

    def evaluate(
        self,
        gt_scenes: Sequence[Scene],
        detections: Mapping[int, Sequence[DecodedPose]] | Sequence[Sequence[DecodedPose]],
        spec: SkeletonSpec,
    ) -> EvalResult:
        image_ids = [scene.image_id for scene in gt_scenes]
        if len(set(image_ids)) != len(image_ids):
            raise AnnotationReferenceError("duplicate image ids in ground truth scenes")
        if isinstance(detections, Mapping):
            unknown = sorted(set(detections) - set(image_ids))
            if unknown:
                raise AnnotationReferenceError(f"detections reference unknown image ids {unknown}")
            per_image = [list(detections.get(image_id, ())) for image_id in image_ids]
        else:
            if len(detections) != len(gt_scenes):
                raise AnnotationReferenceError(
                    f"{len(detections)} detection lists for {len(gt_scenes)} ground truth scenes"
                )
            per_image = [list(items) for items in detections]

        prepared: list[tuple[list[DecodedPose], list[tuple[PoseInstance, float]], np.ndarray]] = []
        num_gt = num_detections = 0
        for scene, image_detections in zip(gt_scenes, per_image):
            gts = [
                (person, self.gt_area(person, scene.area_of(index)))
                for index, person in enumerate(scene.persons)
                if person.labeled_count > 0
            ]
            ranked = [image_detections[index] for index in np.argsort([-d.score for d in image_detections], kind="mergesort")]
            ranked = ranked[:MAX_DETECTIONS]
            num_gt += len(gts)
            num_detections += len(ranked)
            prepared.append((ranked, gts, self._oks_matrix(ranked, gts, spec)))

        band_results: dict[str, tuple[list[float], list[float], list[np.ndarray], int] | None] = {}
        for band_name, band in AREA_BANDS.items():
            images = [self._match_image(ranked, gts, matrix, band) for ranked, gts, matrix in prepared]
            band_results[band_name] = self._accumulate(images)

        overall = band_results["all"]
        aps, recalls, curves = (overall[0], overall[1], overall[2]) if overall else ([0.0] * len(OKS_THRESHOLDS), [0.0] * len(OKS_THRESHOLDS), [])

        def band_ap(name: str) -> float | None:
            result = band_results[name]
            return None if result is None else float(np.mean(result[0]))

        def band_ar(name: str) -> float | None:
            result = band_results[name]
            return None if result is None else float(np.mean(result[1]))

        t50, t75 = OKS_THRESHOLDS.index(0.5), OKS_THRESHOLDS.index(0.75)
        result = EvalResult(
            ap=float(np.mean(aps)),
            ap50=aps[t50],
            ap75=aps[t75],
            ap_m=band_ap("medium"),
            ap_l=band_ap("large"),
            ar=float(np.mean(recalls)),
            ar50=recalls[t50],
            ar75=recalls[t75],
            ar_m=band_ar("medium"),
            ar_l=band_ar("large"),
            per_threshold_ap=dict(zip(OKS_THRESHOLDS, aps)),
            pr_curves=[
                PrecisionRecallCurve(threshold=threshold, recall=RECALL_THRESHOLDS.copy(), precision=curve)
                for threshold, curve in zip(OKS_THRESHOLDS, curves)
            ],
            num_images=len(gt_scenes),
            num_gt=num_gt,
            num_detections=num_detections,
        )
        logger.info(
            "evaluation finished",
            extra={
                "context": {
                    "component": "evalkit",
                    "event": "evaluate",
                    "images": result.num_images,
                    "gt": num_gt,
                    "detections": num_detections,
                    "ap": result.ap,
                }
            },
        )
        return result

    def write_pr_csv(self, result: EvalResult) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(["threshold", "recall", "precision"])
        for curve in result.pr_curves:
            for recall, precision in zip(curve.recall, curve.precision):
                writer.writerow([f"{curve.threshold:.2f}", f"{recall:.2f}", f"{precision:.6f}"])
        return buffer.getvalue()

    def report(self, result: EvalResult) -> str:
        return json.dumps(result.summary(), indent=1, sort_keys=True)


evaluation_service = EvaluationService()
