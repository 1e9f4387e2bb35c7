from __future__ import annotations

from collections.abc import Sequence

import numpy as np

from posefield.core.errors import ConfigError, DimensionError
from posefield.schemas.encoder import EncoderConfig
from posefield.schemas.fields import FieldSet, FieldTensor, output_grid
from posefield.schemas.losses import (
    LOSS_TERMS,
    PDD_SCHEDULES,
    LossConfig,
    LossReport,
    PddScheduleKind,
    SalmProfile,
    SelfSupervisionMode,
    SelfSupervisionPair,
    StagePrediction,
)
from posefield.schemas.skeleton import Scene, SkeletonSpec
from posefield.services.encoder_service import cell_centers

ArrayLike = np.ndarray | FieldTensor


def as_array(value: ArrayLike) -> np.ndarray:
    data = value.data if isinstance(value, FieldTensor) else value
    return np.asarray(data, dtype=np.float64)


def _check_shapes(name: str, *arrays: np.ndarray) -> None:
    shapes = {array.shape for array in arrays}
    if len(shapes) > 1:
        raise DimensionError(f"{name}: shape mismatch {sorted(shapes)}")


class LossService:
    def l2_loss(
        self,
        pred: ArrayLike,
        target: ArrayLike,
        weights: ArrayLike | None = None,
    ) -> tuple[float, np.ndarray]:
        """Summed (not averaged) weighted squared error and its gradient wrt ``pred``."""
        pred_arr, target_arr = as_array(pred), as_array(target)
        _check_shapes("l2_loss", pred_arr, target_arr)
        diff = pred_arr - target_arr
        if weights is None:
            return float(np.sum(diff**2)), 2.0 * diff
        weight_arr = as_array(weights)
        _check_shapes("l2_loss weights", pred_arr, weight_arr)
        if np.any(weight_arr < 0):
            raise ConfigError("l2_loss weights must be nonnegative")
        return float(np.sum(weight_arr * diff**2)), 2.0 * weight_arr * diff

    def kl_loss(self, pair: SelfSupervisionPair, *, epsilon: float = 1e-8) -> tuple[float, np.ndarray, np.ndarray]:
        f_s, f_ps = as_array(pair.f_s), as_array(pair.f_ps)
        _check_shapes("kl_loss", f_s, f_ps)
        p = np.maximum(f_s, epsilon)
        q = np.maximum(f_ps, epsilon)
        log_ratio = np.log(p / q)
        return float(np.sum(p * log_ratio)), log_ratio + 1.0, -p / q

    def self_supervision_kl(
        self,
        heatmaps: ArrayLike,
        ps_heatmaps: ArrayLike,
        mode: SelfSupervisionMode | str = SelfSupervisionMode.P2H,
        *,
        epsilon: float = 1e-8,
    ) -> tuple[float, np.ndarray, np.ndarray]:
        """KL term in the chosen direction(s) with gradients wrt (heatmaps, ps_heatmaps).

        p2h keeps the heatmap branch as the reference, h2p keeps the PAF branch, both sums the two.
        """
        try:
            mode = SelfSupervisionMode(mode)
        except ValueError:
            raise ConfigError(f"unknown self-supervision mode '{mode}'") from None
        loss, grad_s, grad_ps = 0.0, np.zeros_like(as_array(heatmaps)), np.zeros_like(as_array(ps_heatmaps))
        if mode in (SelfSupervisionMode.P2H, SelfSupervisionMode.BOTH):
            forward, d_s, d_ps = self.kl_loss(SelfSupervisionPair(f_s=heatmaps, f_ps=ps_heatmaps), epsilon=epsilon)
            loss, grad_s, grad_ps = loss + forward, grad_s + d_s, grad_ps + d_ps
        if mode in (SelfSupervisionMode.H2P, SelfSupervisionMode.BOTH):
            backward, d_ps, d_s = self.kl_loss(SelfSupervisionPair(f_s=ps_heatmaps, f_ps=heatmaps), epsilon=epsilon)
            loss, grad_s, grad_ps = loss + backward, grad_s + d_s, grad_ps + d_ps
        return loss, grad_s, grad_ps

    def salm_weights(
        self,
        scene: Scene,
        spec: SkeletonSpec,
        enc_cfg: EncoderConfig,
        alpha: float,
        *,
        profile: SalmProfile = SalmProfile.GAUSSIAN,
    ) -> FieldTensor:
        """One weight map per limb: alpha * exp(-d^2 / sigma^2) + 1, sigma = limb length / (4 f_d)."""
        if alpha < 0:
            raise ConfigError(f"alpha must be nonnegative, got {alpha}")
        grid = output_grid(scene.image_size, enc_cfg.f_d)
        xs, ys = cell_centers(grid, enc_cfg.f_d)
        weights = np.ones((spec.num_limbs, *grid), dtype=np.float64)

        for limb_index, (parent, child) in enumerate(spec.limbs):
            extra = np.zeros(grid, dtype=np.float64)
            for person in scene.persons:
                start, end = person.joints[parent], person.joints[child]
                if start is None or end is None:
                    continue
                dx, dy = end.x - start.x, end.y - start.y
                length_sq = dx * dx + dy * dy
                if length_sq <= 0.0:
                    continue
                t = np.clip(((xs - start.x) * dx + (ys - start.y) * dy) / length_sq, 0.0, 1.0)
                dist_sq = (xs - (start.x + t * dx)) ** 2 + (ys - (start.y + t * dy)) ** 2
                sigma = np.sqrt(length_sq) / (4.0 * enc_cfg.f_d)
                if profile == SalmProfile.RAMP:
                    shape = np.maximum(0.0, 1.0 - np.sqrt(dist_sq) / (2.0 * sigma))
                else:
                    shape = np.exp(-dist_sq / (sigma * sigma))
                np.maximum(extra, alpha * shape, out=extra)
            weights[limb_index] += extra
        return FieldTensor(data=weights, f_d=enc_cfg.f_d, image_size=scene.image_size)

    def pdd_weights(
        self,
        target_heatmaps: ArrayLike,
        spec: SkeletonSpec,
        beta: float,
        thresholds: tuple[float, float] = (0.4, 0.4),
    ) -> FieldTensor | np.ndarray:
        """beta where a channel's target is low but its mirror channel's target is high, else 1."""
        weights = self._pdd_heatmap_array(as_array(target_heatmaps), spec, beta, thresholds)
        if isinstance(target_heatmaps, FieldTensor):
            return target_heatmaps.with_data(weights)
        return weights

    def _pdd_heatmap_array(
        self, target: np.ndarray, spec: SkeletonSpec, beta: float, thresholds: tuple[float, float]
    ) -> np.ndarray:
        if not 0.0 <= beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {beta}")
        high, low = thresholds
        weights = np.ones_like(target, dtype=np.float64)
        for channel in range(min(spec.num_joints, target.shape[0])):
            partner = spec.mirror(channel)
            if partner is None:
                continue
            confusion = (target[channel] < low) & (target[partner] >= high)
            weights[channel][confusion] = beta
        return weights

    def pdd_paf_weights(
        self, target_pafs: ArrayLike, spec: SkeletonSpec, beta: float, thresholds: tuple[float, float] = (0.4, 0.4)
    ) -> np.ndarray:
        """PDD for PAF pairs: limbs map through mirror pairs, occupancy is the target vector norm."""
        if not 0.0 <= beta <= 1.0:
            raise ConfigError(f"beta must lie in [0, 1], got {beta}")
        target = as_array(target_pafs)
        high, low = thresholds
        norms = np.hypot(target[0::2], target[1::2])
        weights = np.ones_like(target, dtype=np.float64)
        for limb_index in range(spec.num_limbs):
            partner = spec.mirror_limb(limb_index)
            if partner is None:
                continue
            confusion = (norms[limb_index] < low) & (norms[partner] >= high)
            weights[2 * limb_index][confusion] = beta
            weights[2 * limb_index + 1][confusion] = beta
        return weights

    def pdd_schedule(self, kind: PddScheduleKind | str, num_stages: int) -> list[float]:
        try:
            curve = PDD_SCHEDULES[PddScheduleKind(kind)]
        except ValueError:
            raise ConfigError(f"unknown PDD schedule '{kind}'") from None
        if num_stages < 2:
            raise ConfigError(f"a PDD schedule needs at least 2 stages, got {num_stages}")
        if num_stages == len(curve):
            return list(curve)
        anchors = np.linspace(0.0, 1.0, len(curve))
        return [float(beta) for beta in np.interp(np.linspace(0.0, 1.0, num_stages), anchors, curve)]

    @staticmethod
    def _stage_arrays(stage: StagePrediction | tuple[FieldSet, ArrayLike | None]) -> StagePrediction:
        if isinstance(stage, StagePrediction):
            return StagePrediction(
                heatmaps=as_array(stage.heatmaps),
                pafs=as_array(stage.pafs),
                offsets=as_array(stage.offsets),
                ps_heatmaps=None if stage.ps_heatmaps is None else as_array(stage.ps_heatmaps),
            )
        fields, ps_heatmaps = stage
        return StagePrediction(
            heatmaps=as_array(fields.heatmaps),
            pafs=as_array(fields.pafs),
            offsets=as_array(fields.offsets),
            ps_heatmaps=None if ps_heatmaps is None else as_array(ps_heatmaps),
        )

    def total_loss(
        self,
        per_stage_preds: Sequence[StagePrediction | tuple[FieldSet, ArrayLike | None]],
        target: FieldSet,
        scene: Scene,
        spec: SkeletonSpec,
        enc_cfg: EncoderConfig,
        cfg: LossConfig,
    ) -> LossReport:
        if len(per_stage_preds) != cfg.num_stages:
            raise ConfigError(
                f"{len(per_stage_preds)} prediction stages but beta_schedule has {cfg.num_stages} entries"
            )
        target_heat = as_array(target.heatmaps)
        target_paf = as_array(target.pafs)
        target_off = as_array(target.offsets)
        num_joints = spec.num_joints

        salm = np.repeat(
            as_array(self.salm_weights(scene, spec, enc_cfg, cfg.alpha, profile=cfg.salm_profile)), 2, axis=0
        )
        offset_mask = np.repeat((target_heat[:num_joints] > cfg.offset_mask_threshold).astype(np.float64), 2, axis=0)
        thresholds = (cfg.pdd_high, cfg.pdd_low)

        per_term = dict.fromkeys(LOSS_TERMS, 0.0)
        per_stage: list[float] = []
        gradients: list[dict[str, np.ndarray]] = []

        for stage_index, raw_stage in enumerate(per_stage_preds):
            stage = self._stage_arrays(raw_stage)
            _check_shapes(f"stage {stage_index} heatmaps", stage.heatmaps, target_heat)
            _check_shapes(f"stage {stage_index} pafs", stage.pafs, target_paf)
            _check_shapes(f"stage {stage_index} offsets", stage.offsets, target_off)

            beta = cfg.beta_schedule[stage_index]
            heat_weights = self._pdd_heatmap_array(target_heat, spec, beta, thresholds)
            paf_weights = salm * self.pdd_paf_weights(target_paf, spec, beta, thresholds)
            offset_weights = offset_mask * np.repeat(heat_weights[:num_joints], 2, axis=0)

            loss_s, grad_s = self.l2_loss(stage.heatmaps, target_heat, heat_weights)
            paf_diff = stage.pafs - target_paf
            paf_terms = paf_weights * paf_diff**2
            loss_m, loss_n = float(np.sum(paf_terms[0::2])), float(np.sum(paf_terms[1::2]))
            off_diff = stage.offsets - target_off
            off_terms = offset_weights * off_diff**2
            loss_x, loss_y = float(np.sum(off_terms[0::2])), float(np.sum(off_terms[1::2]))

            grad_heat = cfg.gamma * grad_s
            grad_ps = None
            loss_ps = loss_kl = 0.0
            if cfg.self_supervision:
                if stage.ps_heatmaps is None:
                    raise DimensionError(f"stage {stage_index}: self-supervision needs PAF-branch heatmaps")
                _check_shapes(f"stage {stage_index} ps_heatmaps", stage.ps_heatmaps, target_heat)
                loss_ps, grad_ps = self.l2_loss(stage.ps_heatmaps, target_heat, heat_weights)
                loss_kl, kl_grad_s, kl_grad_ps = self.self_supervision_kl(
                    stage.heatmaps, stage.ps_heatmaps, cfg.self_supervision_mode, epsilon=cfg.kl_epsilon
                )
                grad_heat = grad_heat + kl_grad_s
                grad_ps = grad_ps + kl_grad_ps

            stage_terms = {
                "L_s": loss_s,
                "L_m": loss_m,
                "L_n": loss_n,
                "L_x": loss_x,
                "L_y": loss_y,
                "L_ps": loss_ps,
                "L_kl": loss_kl,
            }
            for name, value in stage_terms.items():
                per_term[name] += value
            per_stage.append(self.combine(stage_terms, cfg))

            stage_grads = {
                "heatmaps": grad_heat,
                "pafs": cfg.delta * 2.0 * paf_weights * paf_diff,
                "offsets": 2.0 * offset_weights * off_diff,
            }
            if grad_ps is not None:
                stage_grads["ps_heatmaps"] = grad_ps
            gradients.append(stage_grads)

        return LossReport(total=float(sum(per_stage)), per_term=per_term, per_stage=per_stage, gradients=gradients)

    @staticmethod
    def combine(terms: dict[str, float], cfg: LossConfig) -> float:
        """gamma*L_s + L_ps + delta*(L_m + L_n) + L_kl + L_x + L_y."""
        return (
            cfg.gamma * terms["L_s"]
            + terms["L_ps"]
            + cfg.delta * (terms["L_m"] + terms["L_n"])
            + terms["L_kl"]
            + terms["L_x"]
            + terms["L_y"]
        )


loss_service = LossService()
