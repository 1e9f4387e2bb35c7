from __future__ import annotations

import logging

import numpy as np

from posefield.schemas.encoder import EncoderConfig, HeatmapCombine
from posefield.schemas.fields import FieldSet, FieldTensor, output_grid
from posefield.schemas.skeleton import Scene, SkeletonSpec

logger = logging.getLogger(__name__)

DEGENERATE_LIMB_LENGTH = 1e-9


def cell_centers(grid: tuple[int, int], f_d: int) -> tuple[np.ndarray, np.ndarray]:
    """Input-space centers ((j + 0.5) * f_d, (i + 0.5) * f_d) as broadcastable (1, W) and (H, 1) arrays."""
    height, width = grid
    xs = (np.arange(width, dtype=np.float64) + 0.5) * f_d
    ys = (np.arange(height, dtype=np.float64) + 0.5) * f_d
    return xs[np.newaxis, :], ys[:, np.newaxis]


class EncoderService:
    def _joint_positions(self, scene: Scene, channel: int) -> list[tuple[float, float]]:
        positions: list[tuple[float, float]] = []
        for person in scene.persons:
            joint = person.joints[channel]
            if joint is not None:
                positions.append((joint.x, joint.y))
        return positions

    def encode_heatmaps(self, scene: Scene, spec: SkeletonSpec, cfg: EncoderConfig) -> FieldTensor:
        grid = output_grid(scene.image_size, cfg.f_d)
        xs, ys = cell_centers(grid, cfg.f_d)
        sigma_sq = cfg.sigma_heat**2
        maps = np.zeros((spec.heatmap_channels, *grid), dtype=np.float64)

        for channel in range(spec.num_joints):
            combined = maps[channel]
            for x, y in self._joint_positions(scene, channel):
                gaussian = np.exp(-((xs - x) ** 2 + (ys - y) ** 2) / sigma_sq)
                if cfg.heatmap_combine == HeatmapCombine.MAX:
                    np.maximum(combined, gaussian, out=combined)
                else:
                    combined += gaussian
            if cfg.heatmap_combine == HeatmapCombine.SUM_CLAMPED:
                np.minimum(combined, 1.0, out=combined)

        if spec.background_channel:
            joint_max = maps[: spec.num_joints].max(axis=0) if spec.num_joints else np.zeros(grid)
            maps[spec.num_joints] = 1.0 - joint_max
        return FieldTensor(data=maps, f_d=cfg.f_d, image_size=scene.image_size)

    def encode_pafs(self, scene: Scene, spec: SkeletonSpec, cfg: EncoderConfig) -> FieldTensor:
        grid = output_grid(scene.image_size, cfg.f_d)
        xs, ys = cell_centers(grid, cfg.f_d)
        halfwidth = cfg.limb_halfwidth * cfg.f_d
        pafs = np.zeros((spec.paf_channels, *grid), dtype=np.float64)
        skipped = 0

        for limb_index, (parent, child) in enumerate(spec.limbs):
            sum_x = np.zeros(grid, dtype=np.float64)
            sum_y = np.zeros(grid, dtype=np.float64)
            for person in scene.persons:
                start, end = person.joints[parent], person.joints[child]
                if start is None or end is None:
                    continue
                dx, dy = end.x - start.x, end.y - start.y
                length = float(np.hypot(dx, dy))
                if length < DEGENERATE_LIMB_LENGTH:
                    skipped += 1
                    continue
                ux, uy = dx / length, dy / length
                rel_x, rel_y = xs - start.x, ys - start.y
                projection = rel_x * ux + rel_y * uy
                distance = np.abs(rel_x * uy - rel_y * ux)
                on_limb = (projection >= 0.0) & (projection <= length) & (distance <= halfwidth)
                sum_x += np.where(on_limb, ux, 0.0)
                sum_y += np.where(on_limb, uy, 0.0)

            # averaging then renormalizing equals normalizing the sum
            norm = np.hypot(sum_x, sum_y)
            nonzero = norm > 1e-12
            safe_norm = np.where(nonzero, norm, 1.0)
            pafs[2 * limb_index] = np.where(nonzero, sum_x / safe_norm, 0.0)
            pafs[2 * limb_index + 1] = np.where(nonzero, sum_y / safe_norm, 0.0)

        if skipped:
            logger.warning(
                "degenerate limbs skipped",
                extra={"context": {"component": "encoder", "event": "skip_limb", "image_id": scene.image_id, "count": skipped}},
            )
        return FieldTensor(data=pafs, f_d=cfg.f_d, image_size=scene.image_size)

    def encode_offsets(
        self,
        scene: Scene,
        spec: SkeletonSpec,
        cfg: EncoderConfig,
        heatmaps: FieldTensor,
    ) -> FieldTensor:
        grid = output_grid(scene.image_size, cfg.f_d)
        xs, ys = cell_centers(grid, cfg.f_d)
        offsets = np.zeros((spec.offset_channels, *grid), dtype=np.float64)

        for channel in range(spec.num_joints):
            positions = self._joint_positions(scene, channel)
            if not positions:
                continue
            valid = heatmaps.data[channel] > cfg.offset_validity
            if not valid.any():
                continue
            joints = np.asarray(positions, dtype=np.float64)
            distances = (xs[np.newaxis] - joints[:, 0, None, None]) ** 2 + (ys[np.newaxis] - joints[:, 1, None, None]) ** 2
            nearest = np.argmin(distances, axis=0)
            target_x = joints[nearest, 0]
            target_y = joints[nearest, 1]
            offset_x = np.clip((target_x - xs) / cfg.f_d, -0.5, 0.5)
            offset_y = np.clip((target_y - ys) / cfg.f_d, -0.5, 0.5)
            offsets[2 * channel] = np.where(valid, offset_x, 0.0)
            offsets[2 * channel + 1] = np.where(valid, offset_y, 0.0)
        return FieldTensor(data=offsets, f_d=cfg.f_d, image_size=scene.image_size)

    def encode_scene(self, scene: Scene, spec: SkeletonSpec, cfg: EncoderConfig) -> FieldSet:
        heatmaps = self.encode_heatmaps(scene, spec, cfg)
        pafs = self.encode_pafs(scene, spec, cfg)
        offsets = self.encode_offsets(scene, spec, cfg, heatmaps)
        return FieldSet(heatmaps=heatmaps, pafs=pafs, offsets=offsets)


encoder_service = EncoderService()
