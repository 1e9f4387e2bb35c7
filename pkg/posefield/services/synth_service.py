from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from numpy.random import PCG64, Generator, SeedSequence

from posefield.core.config import settings
from posefield.core.errors import ConfigError, GenerationError, MatchingSizeError
from posefield.schemas.decoder import DecoderConfig
from posefield.schemas.encoder import SUPPORTED_DOWNSAMPLE_FACTORS, EncoderConfig
from posefield.schemas.fields import FieldSet
from posefield.schemas.skeleton import JointRecord, PoseInstance, Scene, SkeletonSpec
from posefield.schemas.synth import PRNG_ALGORITHM, BenchResult, Corruption, CorruptionKind, UpsampleKernel
from posefield.services.decoder_service import decoder_service
from posefield.services.encoder_service import encoder_service
from posefield.services.upsample_service import upsample_service

logger = logging.getLogger(__name__)

BRUTE_FORCE_MAX_SIDE = 8
MIN_IMAGE_SIDE = 64
MIN_BENCH_TRIALS = 100
LIMB_SCALE_JITTER = 0.15
LIMB_ANGLE_JITTER = np.deg2rad(5.0)

# Standing figure facing the camera, in units of body height, as (parent, child, dx, dy).
# The figure's right side is on the image left. Parents precede children.
CANONICAL_BONES: tuple[tuple[str, str, float, float], ...] = (
    ("neck", "right_shoulder", -0.13, 0.0),
    ("neck", "left_shoulder", 0.13, 0.0),
    ("right_shoulder", "right_elbow", -0.05, 0.17),
    ("left_shoulder", "left_elbow", 0.05, 0.17),
    ("right_elbow", "right_wrist", -0.02, 0.16),
    ("left_elbow", "left_wrist", 0.02, 0.16),
    ("neck", "right_hip", -0.09, 0.35),
    ("neck", "left_hip", 0.09, 0.35),
    ("right_hip", "right_knee", -0.01, 0.22),
    ("left_hip", "left_knee", 0.01, 0.22),
    ("right_knee", "right_ankle", 0.0, 0.21),
    ("left_knee", "left_ankle", 0.0, 0.21),
    ("neck", "nose", 0.0, -0.14),
    ("nose", "right_eye", -0.07, -0.08),
    ("nose", "left_eye", 0.07, -0.08),
    ("right_eye", "right_ear", -0.10, 0.05),
    ("left_eye", "left_ear", 0.10, 0.05),
)


class SynthService:
    def _figure(self, rng: Generator, height: float) -> dict[str, tuple[float, float]]:
        points: dict[str, tuple[float, float]] = {"neck": (0.0, 0.0)}
        for parent, child, dx, dy in CANONICAL_BONES:
            scale = height * rng.uniform(1.0 - LIMB_SCALE_JITTER, 1.0 + LIMB_SCALE_JITTER)
            angle = rng.uniform(-LIMB_ANGLE_JITTER, LIMB_ANGLE_JITTER)
            cos_a, sin_a = np.cos(angle), np.sin(angle)
            px, py = points[parent]
            points[child] = (
                px + scale * (dx * cos_a - dy * sin_a),
                py + scale * (dx * sin_a + dy * cos_a),
            )
        return points

    def _place(
        self, points: dict[str, tuple[float, float]], offset: tuple[float, float]
    ) -> dict[str, tuple[float, float]]:
        placed = {name: (x + offset[0], y + offset[1]) for name, (x, y) in points.items() if name != "neck"}
        left, right = placed["left_shoulder"], placed["right_shoulder"]
        placed["neck"] = ((left[0] + right[0]) / 2.0, (left[1] + right[1]) / 2.0)
        return placed

    def random_scene(
        self,
        seed: int,
        num_persons: int,
        image_size: tuple[int, int],
        spec: SkeletonSpec,
        min_separation: float,
        *,
        image_id: int = 0,
        max_attempts: int | None = None,
    ) -> Scene:
        width, height = image_size
        if width < MIN_IMAGE_SIDE or height < MIN_IMAGE_SIDE:
            raise ConfigError(f"synthetic images need at least {MIN_IMAGE_SIDE}x{MIN_IMAGE_SIDE}, got {width}x{height}")
        if num_persons < 0:
            raise ConfigError(f"num_persons must be nonnegative, got {num_persons}")
        missing = {name for bone in CANONICAL_BONES for name in bone[:2]} - set(spec.joint_names)
        if missing:
            raise ConfigError(f"synthetic figures need joints {sorted(missing)}")

        rng = Generator(PCG64(seed))
        budget = max_attempts or settings.SYNTH_MAX_ATTEMPTS
        boxes: list[tuple[float, float, float, float]] = []
        persons: list[PoseInstance] = []
        attempts = 0
        while len(persons) < num_persons:
            attempts += 1
            if attempts > budget:
                raise GenerationError(
                    f"could not place {num_persons} persons in {width}x{height} after {budget} attempts; "
                    f"try fewer persons or a smaller min_separation"
                )
            figure_height = rng.uniform(settings.SYNTH_PERSON_HEIGHT_MIN, settings.SYNTH_PERSON_HEIGHT_MAX)
            figure = self._figure(rng, figure_height)
            xs = [x for x, _ in figure.values()]
            ys = [y for _, y in figure.values()]
            span_x, span_y = max(xs) - min(xs), max(ys) - min(ys)
            if span_x >= width - 2 or span_y >= height - 2:
                continue
            offset = (
                rng.uniform(1.0 - min(xs), width - 1.0 - max(xs)),
                rng.uniform(1.0 - min(ys), height - 1.0 - max(ys)),
            )
            placed = self._place(figure, offset)
            box = (
                min(x for x, _ in placed.values()),
                min(y for _, y in placed.values()),
                max(x for x, _ in placed.values()),
                max(y for _, y in placed.values()),
            )
            if any(self._boxes_too_close(box, other, min_separation) for other in boxes):
                continue
            boxes.append(box)
            joints = tuple(
                JointRecord(x=placed[name][0], y=placed[name][1]) if name in placed else None
                for name in spec.joint_names
            )
            persons.append(PoseInstance(joints=joints))

        if attempts > num_persons:
            logger.debug(
                "synthetic placement retried",
                extra={"context": {"component": "synth", "event": "retry", "seed": seed, "attempts": attempts}},
            )
        return Scene(image_id=image_id, image_size=(width, height), persons=tuple(persons))

    @staticmethod
    def _boxes_too_close(
        box: tuple[float, float, float, float], other: tuple[float, float, float, float], gap: float
    ) -> bool:
        return not (
            box[2] + gap <= other[0]
            or other[2] + gap <= box[0]
            or box[3] + gap <= other[1]
            or other[3] + gap <= box[1]
        )

    def corrupt(
        self,
        fields: FieldSet,
        kind: Corruption,
        seed: int,
        *,
        spec: SkeletonSpec | None = None,
    ) -> FieldSet:
        rng = Generator(PCG64(seed))
        members = (fields.heatmaps, fields.pafs, fields.offsets)

        if kind.kind == CorruptionKind.GAUSSIAN_NOISE:
            if kind.sigma == 0:
                return fields
            noisy = [member.data + rng.normal(0.0, kind.sigma, size=member.data.shape) for member in members]
            noisy[2] = np.clip(noisy[2], -0.5, 0.5)
            return FieldSet(*(member.with_data(data) for member, data in zip(members, noisy)))

        if kind.kind == CorruptionKind.DROPOUT:
            if kind.p == 0:
                return fields
            dropped = [np.where(rng.random(member.data.shape) < kind.p, 0.0, member.data) for member in members]
            return FieldSet(*(member.with_data(data) for member, data in zip(members, dropped)))

        pairs = kind.channels or (spec.mirror_pairs if spec is not None else ())
        if not pairs:
            raise ConfigError("mirror_swap needs channel pairs or a skeleton with mirror pairs")
        num_joints = fields.offsets.channels // 2
        heatmaps = np.array(fields.heatmaps.data)
        offsets = np.array(fields.offsets.data)
        for left, right in pairs:
            for channel in (left, right):
                if not 0 <= channel < num_joints:
                    raise ConfigError(f"mirror_swap channel {channel} is not a joint channel (0..{num_joints - 1})")
            heatmaps[[left, right]] = heatmaps[[right, left]]
            offsets[[2 * left, 2 * left + 1, 2 * right, 2 * right + 1]] = offsets[
                [2 * right, 2 * right + 1, 2 * left, 2 * left + 1]
            ]
        return FieldSet(
            heatmaps=fields.heatmaps.with_data(heatmaps),
            pafs=fields.pafs,
            offsets=fields.offsets.with_data(offsets),
        )

    def bench_trial_errors(
        self,
        f_d: int,
        kernel: UpsampleKernel | str,
        seeds: Sequence[SeedSequence],
        *,
        sigma_cells: float,
        grid_cells: int,
        subpixel: bool = False,
    ) -> list[float]:
        kernel = UpsampleKernel(kernel)
        side = grid_cells * f_d
        low = (grid_cells // 2 - 1) * f_d
        high = (grid_cells // 2 + 1) * f_d
        enc_cfg = EncoderConfig(f_d=f_d, sigma_heat=sigma_cells * f_d)
        dec_cfg = DecoderConfig(peak_threshold=0.0)
        centers = (np.arange(grid_cells, dtype=np.float64) + 0.5) * f_d
        sigma_sq = (sigma_cells * f_d) ** 2

        spec = SkeletonSpec(
            joint_names=("joint",), background_channel=False, limbs=(), mirror_pairs=(), oks_kappa=(1.0,)
        )
        errors: list[float] = []
        for child in seeds:
            rng = Generator(PCG64(child))
            joint_x, joint_y = rng.uniform(low, high, size=2)
            if kernel == UpsampleKernel.RIE:
                scene = Scene(
                    image_size=(side, side),
                    persons=(PoseInstance(joints=(JointRecord(x=joint_x, y=joint_y),)),),
                )
                heatmaps = encoder_service.encode_heatmaps(scene, spec, enc_cfg)
                offsets = encoder_service.encode_offsets(scene, spec, enc_cfg, heatmaps)
                peak = max(decoder_service.extract_peaks(heatmaps, dec_cfg), key=lambda candidate: candidate.score)
                x, y = decoder_service.refine_peak(peak, offsets, f_d).refined_position
            else:
                plane = np.exp(
                    -((centers[np.newaxis, :] - joint_x) ** 2 + (centers[:, np.newaxis] - joint_y) ** 2) / sigma_sq
                )
                upsampled = upsample_service.upsample(plane, f_d, kernel)
                x, y = upsample_service.locate_peak(upsampled, subpixel=subpixel)
            errors.append(float(np.hypot(x - joint_x, y - joint_y)))
        return errors

    def bench_upsample_error(
        self,
        f_d: int,
        interpolation: UpsampleKernel | str,
        trials: int,
        seed: int,
        *,
        subpixel: bool = False,
        sigma_cells: float | None = None,
        grid_cells: int | None = None,
        jobs: int = 1,
    ) -> BenchResult:
        from posefield.workers.models import WorkerJobType
        from posefield.workers.worker_service import worker_service

        kernel = UpsampleKernel(interpolation)
        if trials < MIN_BENCH_TRIALS:
            raise ConfigError(f"bench needs at least {MIN_BENCH_TRIALS} trials, got {trials}")
        if f_d not in SUPPORTED_DOWNSAMPLE_FACTORS:
            raise ConfigError(f"unsupported downsample factor {f_d}; expected one of {SUPPORTED_DOWNSAMPLE_FACTORS}")
        grid = grid_cells or settings.BENCH_GRID_CELLS
        if grid < 4:
            raise ConfigError(f"bench grid needs at least 4 cells per side, got {grid}")

        seeds = SeedSequence(seed).spawn(trials)
        chunks = max(1, int(jobs))
        bounds = np.linspace(0, trials, chunks + 1).astype(int)
        payloads = [
            {
                "f_d": f_d,
                "kernel": kernel,
                "seeds": seeds[start:stop],
                "sigma_cells": sigma_cells or settings.BENCH_SIGMA_CELLS,
                "grid_cells": grid,
                "subpixel": subpixel,
            }
            for start, stop in zip(bounds[:-1], bounds[1:])
            if stop > start
        ]
        results = worker_service.run_batch(WorkerJobType.BENCH, payloads, jobs=chunks)
        errors = np.array([error for result in results for error in result["errors"]])
        return BenchResult(
            f_d=f_d,
            kernel=kernel.value,
            trials=trials,
            mean_px=float(errors.mean()),
            p95_px=float(np.percentile(errors, 95)),
            seed=seed,
            prng=PRNG_ALGORITHM,
        )

    def brute_force_matching(self, scores: Sequence[Sequence[float]] | np.ndarray) -> tuple[list[tuple[int, int]], float]:
        """Enumerate every node-disjoint edge subset; ties go to the lexicographically smallest edge list."""
        weights = np.asarray(scores, dtype=np.float64)
        if weights.ndim != 2:
            raise MatchingSizeError(f"score matrix must be 2-D, got shape {weights.shape}")
        rows, cols = weights.shape
        if rows > BRUTE_FORCE_MAX_SIDE or cols > BRUTE_FORCE_MAX_SIDE:
            raise MatchingSizeError(
                f"brute force matching supports at most {BRUTE_FORCE_MAX_SIDE}x{BRUTE_FORCE_MAX_SIDE}, got {rows}x{cols}"
            )

        best_edges: list[tuple[int, int]] = []
        best_weight = 0.0

        def visit(row: int, used: int, edges: list[tuple[int, int]], weight: float) -> None:
            nonlocal best_edges, best_weight
            if row == rows:
                if weight > best_weight or (weight == best_weight and edges < best_edges):
                    best_edges, best_weight = list(edges), weight
                return
            for col in range(cols):
                if used & (1 << col) or weights[row, col] <= 0:
                    continue
                edges.append((row, col))
                visit(row + 1, used | (1 << col), edges, weight + weights[row, col])
                edges.pop()
            visit(row + 1, used, edges, weight)

        visit(0, 0, [], 0.0)
        return best_edges, float(best_weight)

    def strictly_dominant_matrix(self, seed: int, size: int, *, max_off_diagonal: int = 9) -> np.ndarray:
        """Integer score matrix whose diagonal beats its row and column off-diagonal sums."""
        if size < 1:
            raise ConfigError(f"matrix size must be positive, got {size}")
        rng = Generator(PCG64(seed))
        matrix = rng.integers(0, max_off_diagonal + 1, size=(size, size)).astype(np.float64)
        np.fill_diagonal(matrix, 0.0)
        dominance = matrix.sum(axis=0) + matrix.sum(axis=1)
        np.fill_diagonal(matrix, dominance + 1.0 + rng.integers(0, max_off_diagonal + 1, size=size))
        return matrix


synth_service = SynthService()
