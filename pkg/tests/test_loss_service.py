from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from pydantic import ValidationError

from posefield.core.errors import ConfigError, DimensionError
from posefield.schemas.encoder import EncoderConfig
from posefield.schemas.fields import FieldSet, FieldTensor
from posefield.schemas.losses import LossConfig, SalmProfile, SelfSupervisionMode, SelfSupervisionPair, StagePrediction
from posefield.schemas.skeleton import JointRecord, PoseInstance, Scene, SkeletonSpec
from posefield.services.encoder_service import encoder_service
from posefield.services.loss_service import loss_service
from tests.conftest import make_scene

H = 1e-3


@pytest.fixture
def hands() -> SkeletonSpec:
    return SkeletonSpec(
        joint_names=("left_hand", "right_hand"),
        limbs=((0, 1),),
        mirror_pairs=((0, 1),),
        oks_kappa=(0.1, 0.1),
    )


@pytest.fixture
def hands_scene() -> Scene:
    return Scene(
        image_id=1,
        image_size=(32, 32),
        persons=(PoseInstance(joints=(JointRecord(x=6.0, y=10.0), JointRecord(x=25.0, y=20.0))),),
    )


def random_fieldset(rng: np.random.Generator, low: float = 0.0, high: float = 1.0) -> FieldSet:
    def tensor(channels: int) -> FieldTensor:
        return FieldTensor(data=rng.uniform(low, high, (channels, 4, 4)), f_d=8, image_size=(32, 32))

    return FieldSet(heatmaps=tensor(3), pafs=tensor(2), offsets=tensor(4))


def random_stage(rng: np.random.Generator) -> StagePrediction:
    return StagePrediction(
        heatmaps=rng.uniform(0.3, 0.9, (3, 4, 4)),
        pafs=rng.uniform(-1.0, 1.0, (2, 4, 4)),
        offsets=rng.uniform(-0.5, 0.5, (4, 4, 4)),
        ps_heatmaps=rng.uniform(0.3, 0.9, (3, 4, 4)),
    )


def test_l2_identity_and_single_element():
    pred = np.arange(12.0).reshape(3, 4)
    loss, grad = loss_service.l2_loss(pred, pred.copy())
    assert loss == 0.0
    assert not grad.any()
    loss, grad = loss_service.l2_loss(np.array([1.0]), np.array([0.0]), np.array([1.0]))
    assert (loss, grad.tolist()) == (1.0, [2.0])


def test_l2_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    pred, target, weights = rng.normal(size=(3, 4, 4)), rng.normal(size=(3, 4, 4)), rng.uniform(0, 2, (3, 4, 4))
    _, grad = loss_service.l2_loss(pred, target, weights)
    numeric = np.zeros_like(pred)
    for index in np.ndindex(pred.shape):
        up, down = pred.copy(), pred.copy()
        up[index] += H
        down[index] -= H
        numeric[index] = (loss_service.l2_loss(up, target, weights)[0] - loss_service.l2_loss(down, target, weights)[0]) / (2 * H)
    np.testing.assert_allclose(grad, numeric, rtol=1e-4, atol=1e-7)


def test_l2_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_service.l2_loss(np.zeros((2, 2)), np.zeros((2, 3)))


def test_kl_identity_and_single_element():
    field = np.random.default_rng(0).uniform(0.0, 1.0, (3, 4, 4))
    loss, _, _ = loss_service.kl_loss(SelfSupervisionPair(f_s=field, f_ps=field.copy()))
    assert loss == pytest.approx(0.0, abs=1e-9)
    loss, grad_s, grad_ps = loss_service.kl_loss(SelfSupervisionPair(f_s=np.array([0.5]), f_ps=np.array([0.25])))
    assert loss == pytest.approx(0.5 * math.log(2.0))
    assert grad_s[0] == pytest.approx(math.log(2.0) + 1.0)
    assert grad_ps[0] == pytest.approx(-2.0)


def test_kl_zero_cells_are_finite():
    loss, grad_s, grad_ps = loss_service.kl_loss(SelfSupervisionPair(f_s=np.zeros(3), f_ps=np.zeros(3)))
    assert loss == pytest.approx(0.0, abs=1e-12)
    assert np.isfinite(grad_s).all() and np.isfinite(grad_ps).all()


def test_kl_shape_mismatch():
    with pytest.raises(DimensionError):
        loss_service.kl_loss(SelfSupervisionPair(f_s=np.zeros(3), f_ps=np.zeros(4)))


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (2, 3, 3), elements=st.floats(0.01, 1.0)),
    arrays(np.float64, (2, 3, 3), elements=st.floats(0.01, 1.0)),
)
def test_kl_of_equal_mass_maps_is_nonnegative(raw_s, raw_ps):
    f_s = raw_s / raw_s.sum()
    f_ps = raw_ps / raw_ps.sum()
    loss, _, _ = loss_service.kl_loss(SelfSupervisionPair(f_s=f_s, f_ps=f_ps))
    assert loss >= -1e-12
    same, _, _ = loss_service.kl_loss(SelfSupervisionPair(f_s=f_s, f_ps=f_s.copy()))
    assert same == pytest.approx(0.0, abs=1e-9)


def test_salm_on_segment_and_at_sigma(spec):
    enc_cfg = EncoderConfig(f_d=8)
    limb = spec.limbs.index((spec.joint_index("right_shoulder"), spec.joint_index("right_elbow")))

    on_segment = make_scene(spec, [{"right_shoulder": (4.0, 4.0), "right_elbow": (68.0, 4.0)}], size=(128, 64))
    weights = loss_service.salm_weights(on_segment, spec, enc_cfg, 10.0).data
    assert weights[limb, 0, 1] == pytest.approx(11.0)

    shifted = make_scene(spec, [{"right_shoulder": (4.0, 6.0), "right_elbow": (68.0, 6.0)}], size=(128, 64))
    weights = loss_service.salm_weights(shifted, spec, enc_cfg, 10.0).data
    assert weights[limb, 0, 1] == pytest.approx(10.0 * math.exp(-1.0) + 1.0, rel=1e-6)
    assert weights.min() >= 1.0


def test_salm_alpha_zero_is_baseline(spec, enc_cfg):
    scene = make_scene(spec, [{"right_shoulder": (4.0, 4.0), "right_elbow": (68.0, 40.0)}])
    for profile in SalmProfile:
        weights = loss_service.salm_weights(scene, spec, enc_cfg, 0.0, profile=profile).data
        assert (weights == 1.0).all()


def test_salm_ramp_peaks_on_segment(spec):
    enc_cfg = EncoderConfig(f_d=8)
    limb = spec.limbs.index((spec.joint_index("right_shoulder"), spec.joint_index("right_elbow")))
    scene = make_scene(spec, [{"right_shoulder": (4.0, 4.0), "right_elbow": (68.0, 4.0)}], size=(128, 64))
    weights = loss_service.salm_weights(scene, spec, enc_cfg, 10.0, profile=SalmProfile.RAMP).data
    assert weights[limb, 0, 1] == pytest.approx(11.0)
    assert weights[limb, 7, 1] == 1.0


def test_salm_negative_alpha(spec, enc_cfg):
    with pytest.raises(ConfigError):
        loss_service.salm_weights(make_scene(spec, []), spec, enc_cfg, -1.0)


def test_pdd_marks_mirror_confusion(spec, enc_cfg):
    scene = make_scene(spec, [{"left_knee": (20.0, 20.0)}], size=(64, 64))
    target = encoder_service.encode_heatmaps(scene, spec, enc_cfg)
    weights = loss_service.pdd_weights(target, spec, 0.5)
    assert isinstance(weights, FieldTensor)
    assert weights.data[spec.joint_index("right_knee"), 2, 2] == 0.5
    assert weights.data[spec.joint_index("left_knee"), 2, 2] == 1.0
    assert weights.data[spec.joint_index("nose"), 2, 2] == 1.0

    assert (loss_service.pdd_weights(target, spec, 1.0).data == 1.0).all()
    zeroed = loss_service.pdd_weights(target.data, spec, 0.0)
    assert zeroed[spec.joint_index("right_knee"), 2, 2] == 0.0


@settings(max_examples=60, deadline=None)
@given(
    arrays(np.float64, (3, 4, 4), elements=st.floats(0.0, 1.0)),
    st.floats(0.0, 0.95),
)
def test_pdd_weights_match_brute_force_zone(target, beta):
    hands = SkeletonSpec(
        joint_names=("left_hand", "right_hand"), limbs=((0, 1),), mirror_pairs=((0, 1),), oks_kappa=(0.1, 0.1)
    )
    weights = loss_service.pdd_weights(target, hands, beta)
    assert set(np.unique(weights).tolist()) <= {beta, 1.0}
    expected = 0
    for channel, partner in ((0, 1), (1, 0)):
        for row in range(4):
            for col in range(4):
                if target[channel, row, col] < 0.4 and target[partner, row, col] >= 0.4:
                    expected += 1
                    assert weights[channel, row, col] == beta
    assert int(np.count_nonzero(weights != 1.0)) == expected
    assert (weights[2] == 1.0).all()


def test_pdd_paf_uses_mirror_limbs(spec, enc_cfg):
    scene = make_scene(spec, [{"left_elbow": (20.0, 20.0), "left_wrist": (60.0, 20.0)}], size=(64, 64))
    pafs = encoder_service.encode_pafs(scene, spec, enc_cfg)
    weights = loss_service.pdd_paf_weights(pafs, spec, 0.25)
    right = spec.limbs.index((spec.joint_index("right_elbow"), spec.joint_index("right_wrist")))
    left = spec.limbs.index((spec.joint_index("left_elbow"), spec.joint_index("left_wrist")))
    assert weights[2 * right, 2, 4] == 0.25
    assert weights[2 * right + 1, 2, 4] == 0.25
    assert weights[2 * left, 2, 4] == 1.0


def test_pdd_schedules():
    assert loss_service.pdd_schedule("quadratic_b", 6) == [0.00, 0.05, 0.15, 0.31, 0.65, 1.00]
    assert loss_service.pdd_schedule("linear", 6) == [0.0, 0.2, 0.4, 0.6, 0.8, 1.0]
    assert loss_service.pdd_schedule("quadratic_a", 6) == [0.00, 0.45, 0.69, 0.85, 0.95, 1.00]
    for kind in ("linear", "quadratic_a", "quadratic_b"):
        for stages in (2, 3, 4, 9):
            schedule = loss_service.pdd_schedule(kind, stages)
            assert len(schedule) == stages
            assert schedule[0] == 0.0 and schedule[-1] == 1.0
            assert schedule == sorted(schedule)


def test_pdd_schedule_errors():
    with pytest.raises(ConfigError):
        loss_service.pdd_schedule("linear", 1)
    with pytest.raises(ConfigError):
        loss_service.pdd_schedule("cubic", 6)


def test_loss_config_ties_delta_to_gamma():
    assert LossConfig().delta == 10.0
    assert LossConfig(gamma=0.0).delta == 1.0
    with pytest.raises(ValidationError):
        LossConfig(gamma=9.0, delta=3.0)
    with pytest.raises(ValidationError):
        LossConfig(beta_schedule=(0.5, 0.2, 1.0))


def test_perfect_predictions_cost_nothing(hands, hands_scene):
    target = random_fieldset(np.random.default_rng(1))
    enc_cfg = EncoderConfig(f_d=8)
    stages = [(target, target.heatmaps), (target, target.heatmaps)]
    cfg = LossConfig(beta_schedule=(0.3, 1.0))
    report = loss_service.total_loss(stages, target, hands_scene, hands, enc_cfg, cfg)
    assert report.total == pytest.approx(0.0, abs=1e-9)

    quiet = LossConfig(beta_schedule=(0.3, 1.0), self_supervision=False)
    report = loss_service.total_loss(stages, target, hands_scene, hands, enc_cfg, quiet)
    assert report.total == 0.0
    for stage in report.gradients:
        assert set(stage) == {"heatmaps", "pafs", "offsets"}
        assert all(not grad.any() for grad in stage.values())


def test_degenerate_config_reduces_to_paf_and_offset_l2(hands, hands_scene):
    rng = np.random.default_rng(5)
    target = random_fieldset(rng)
    stage = random_stage(rng)
    cfg = LossConfig(gamma=0.0, alpha=0.0, beta_schedule=(1.0,), self_supervision=False)
    report = loss_service.total_loss([stage], target, hands_scene, hands, EncoderConfig(f_d=8), cfg)

    mask = np.repeat(target.heatmaps.data[:2] > 0.4, 2, axis=0)
    expected = np.sum((stage.pafs - target.pafs.data) ** 2) + np.sum(mask * (stage.offsets - target.offsets.data) ** 2)
    assert report.total == pytest.approx(expected, rel=1e-9)


FOUR_LIMBS = SkeletonSpec(
    joint_names=("left_hand", "right_hand", "left_foot", "right_foot"),
    limbs=((0, 1), (2, 3), (0, 2)),
    mirror_pairs=((0, 1), (2, 3)),
    oks_kappa=(0.1, 0.1, 0.1, 0.1),
)


def random_problem(
    rng: np.random.Generator, spec: SkeletonSpec, rows: int, cols: int, num_stages: int = 2
) -> tuple[FieldSet, Scene, list[StagePrediction]]:
    image_size = (8 * cols, 8 * rows)

    def tensor(channels: int, low: float, high: float) -> FieldTensor:
        return FieldTensor(data=rng.uniform(low, high, (channels, rows, cols)), f_d=8, image_size=image_size)

    target = FieldSet(
        heatmaps=tensor(spec.heatmap_channels, 0.0, 1.0),
        pafs=tensor(spec.paf_channels, -1.0, 1.0),
        offsets=tensor(spec.offset_channels, -0.5, 0.5),
    )
    persons = tuple(
        PoseInstance(
            joints=tuple(
                JointRecord(x=float(rng.uniform(0, image_size[0])), y=float(rng.uniform(0, image_size[1])))
                for _ in spec.joint_names
            )
        )
        for _ in range(int(rng.integers(1, 3)))
    )
    scene = Scene(image_id=1, image_size=image_size, persons=persons)
    stages = [
        StagePrediction(
            heatmaps=rng.uniform(0.3, 0.9, (spec.heatmap_channels, rows, cols)),
            pafs=rng.uniform(-1.0, 1.0, (spec.paf_channels, rows, cols)),
            offsets=rng.uniform(-0.5, 0.5, (spec.offset_channels, rows, cols)),
            ps_heatmaps=rng.uniform(0.3, 0.9, (spec.heatmap_channels, rows, cols)),
        )
        for _ in range(num_stages)
    ]
    return target, scene, stages


def five_point_derivative(evaluate, array: np.ndarray, index: tuple[int, ...]) -> float:
    original = array[index]
    values = []
    for step in (2.0, 1.0, -1.0, -2.0):
        array[index] = original + step * H
        values.append(evaluate())
    array[index] = original
    return (-values[0] + 8.0 * values[1] - 8.0 * values[2] + values[3]) / (12.0 * H)


def test_total_gradient_matches_finite_differences(hands):
    modes = list(SelfSupervisionMode)
    enc_cfg = EncoderConfig(f_d=8)
    for seed in range(50):
        rng = np.random.default_rng(seed)
        spec = FOUR_LIMBS if seed % 2 else hands
        target, scene, stages = random_problem(rng, spec, int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        cfg = LossConfig(beta_schedule=(float(rng.uniform(0.0, 1.0)), 1.0), self_supervision_mode=modes[seed % 3])
        report = loss_service.total_loss(stages, target, scene, spec, enc_cfg, cfg)

        def evaluate() -> float:
            return loss_service.total_loss(stages, target, scene, spec, enc_cfg, cfg).total

        for stage_index, stage in enumerate(stages):
            for member in ("heatmaps", "pafs", "offsets", "ps_heatmaps"):
                array = getattr(stage, member)
                analytic = report.gradients[stage_index][member]
                indices = list(np.ndindex(array.shape))
                for pick in rng.choice(len(indices), size=min(6, len(indices)), replace=False):
                    index = indices[pick]
                    numeric = five_point_derivative(evaluate, array, index)
                    if abs(analytic[index]) > 1e-6:
                        assert abs(analytic[index] - numeric) / abs(analytic[index]) < 1e-4, (seed, member, index)
                    else:
                        assert abs(numeric) < 1e-5


def test_alpha_zero_matches_unweighted_limbs(hands, hands_scene):
    rng = np.random.default_rng(8)
    target = random_fieldset(rng)
    stages = [random_stage(rng), random_stage(rng)]
    enc_cfg = EncoderConfig(f_d=8)
    bare_scene = Scene(image_id=hands_scene.image_id, image_size=hands_scene.image_size, persons=())
    cfg = LossConfig(alpha=0.0, beta_schedule=(0.3, 1.0))

    weighted = loss_service.total_loss(stages, target, hands_scene, hands, enc_cfg, cfg)
    unweighted = loss_service.total_loss(stages, target, bare_scene, hands, enc_cfg, LossConfig(beta_schedule=(0.3, 1.0)))
    assert weighted.total == unweighted.total
    assert weighted.per_term == unweighted.per_term
    for mine, theirs in zip(weighted.gradients, unweighted.gradients):
        assert all(np.array_equal(mine[name], theirs[name]) for name in mine)

    attended = loss_service.total_loss(stages, target, hands_scene, hands, enc_cfg, LossConfig(beta_schedule=(0.3, 1.0)))
    assert attended.per_term["L_m"] + attended.per_term["L_n"] > weighted.per_term["L_m"] + weighted.per_term["L_n"]


def test_total_loss_follows_a_joint_and_limb_relabeling():
    joint_order = (3, 0, 2, 1)
    limb_order = (2, 0, 1)
    new_index = {old: new for new, old in enumerate(joint_order)}
    relabeled = SkeletonSpec(
        joint_names=tuple(FOUR_LIMBS.joint_names[old] for old in joint_order),
        limbs=tuple(tuple(new_index[joint] for joint in FOUR_LIMBS.limbs[old]) for old in limb_order),
        mirror_pairs=tuple(tuple(new_index[joint] for joint in pair) for pair in FOUR_LIMBS.mirror_pairs),
        oks_kappa=FOUR_LIMBS.oks_kappa,
    )
    heat_perm = [*joint_order, 4]
    paf_perm = [2 * old + axis for old in limb_order for axis in (0, 1)]
    offset_perm = [2 * old + axis for old in joint_order for axis in (0, 1)]

    def permuted(array: np.ndarray, order: list[int]) -> np.ndarray:
        return np.ascontiguousarray(np.asarray(array, dtype=np.float64)[order])

    rng = np.random.default_rng(21)
    target, scene, stages = random_problem(rng, FOUR_LIMBS, 5, 7)
    moved_target = FieldSet(
        heatmaps=target.heatmaps.with_data(permuted(target.heatmaps.data, heat_perm)),
        pafs=target.pafs.with_data(permuted(target.pafs.data, paf_perm)),
        offsets=target.offsets.with_data(permuted(target.offsets.data, offset_perm)),
    )
    moved_scene = Scene(
        image_id=scene.image_id,
        image_size=scene.image_size,
        persons=tuple(PoseInstance(joints=tuple(person.joints[old] for old in joint_order)) for person in scene.persons),
    )
    moved_stages = [
        StagePrediction(
            heatmaps=permuted(stage.heatmaps, heat_perm),
            pafs=permuted(stage.pafs, paf_perm),
            offsets=permuted(stage.offsets, offset_perm),
            ps_heatmaps=permuted(stage.ps_heatmaps, heat_perm),
        )
        for stage in stages
    ]
    enc_cfg = EncoderConfig(f_d=8)
    cfg = LossConfig(beta_schedule=(0.4, 1.0))

    original = loss_service.total_loss(stages, target, scene, FOUR_LIMBS, enc_cfg, cfg)
    moved = loss_service.total_loss(moved_stages, moved_target, moved_scene, relabeled, enc_cfg, cfg)
    assert moved.total == pytest.approx(original.total, rel=1e-12)
    for name, value in original.per_term.items():
        assert moved.per_term[name] == pytest.approx(value, rel=1e-12, abs=1e-12)
    for mine, theirs in zip(original.gradients, moved.gradients):
        np.testing.assert_allclose(theirs["heatmaps"], mine["heatmaps"][heat_perm], rtol=1e-12)
        np.testing.assert_allclose(theirs["pafs"], mine["pafs"][paf_perm], rtol=1e-12)
        np.testing.assert_allclose(theirs["offsets"], mine["offsets"][offset_perm], rtol=1e-12)


def test_self_supervision_modes_pick_kl_directions():
    heat, ps = np.array([0.25]), np.array([0.5])
    loss, grad_s, grad_ps = loss_service.self_supervision_kl(heat, ps, "p2h")
    assert loss == pytest.approx(0.25 * math.log(0.5))
    assert grad_s[0] == pytest.approx(math.log(0.5) + 1.0)
    assert grad_ps[0] == pytest.approx(-0.5)

    loss, grad_s, grad_ps = loss_service.self_supervision_kl(heat, ps, SelfSupervisionMode.H2P)
    assert loss == pytest.approx(0.5 * math.log(2.0))
    assert grad_s[0] == pytest.approx(-2.0)
    assert grad_ps[0] == pytest.approx(math.log(2.0) + 1.0)

    loss, grad_s, grad_ps = loss_service.self_supervision_kl(heat, ps, "both")
    assert loss == pytest.approx(0.25 * math.log(0.5) + 0.5 * math.log(2.0))
    assert grad_s[0] == pytest.approx(math.log(0.5) + 1.0 - 2.0)
    assert grad_ps[0] == pytest.approx(-0.5 + math.log(2.0) + 1.0)

    with pytest.raises(ConfigError):
        loss_service.self_supervision_kl(heat, ps, "sideways")


def test_total_loss_uses_configured_kl_direction(hands, hands_scene):
    rng = np.random.default_rng(6)
    target = random_fieldset(rng)
    stage = random_stage(rng)
    enc_cfg = EncoderConfig(f_d=8)
    forward = loss_service.kl_loss(SelfSupervisionPair(f_s=stage.heatmaps, f_ps=stage.ps_heatmaps))[0]
    backward = loss_service.kl_loss(SelfSupervisionPair(f_s=stage.ps_heatmaps, f_ps=stage.heatmaps))[0]

    reports = {
        mode: loss_service.total_loss(
            [stage], target, hands_scene, hands, enc_cfg, LossConfig(beta_schedule=(1.0,), self_supervision_mode=mode)
        )
        for mode in SelfSupervisionMode
    }
    assert reports[SelfSupervisionMode.P2H].per_term["L_kl"] == pytest.approx(forward)
    assert reports[SelfSupervisionMode.H2P].per_term["L_kl"] == pytest.approx(backward)
    assert reports[SelfSupervisionMode.BOTH].per_term["L_kl"] == pytest.approx(forward + backward)
    assert LossConfig().self_supervision_mode == SelfSupervisionMode.P2H
    with pytest.raises(ValidationError):
        LossConfig(self_supervision_mode="sideways")


def test_total_loss_terms_combine_into_total(hands, hands_scene):
    rng = np.random.default_rng(2)
    target = random_fieldset(rng)
    cfg = LossConfig(beta_schedule=(0.0, 1.0))
    report = loss_service.total_loss([random_stage(rng), random_stage(rng)], target, hands_scene, hands, EncoderConfig(f_d=8), cfg)
    assert report.total == pytest.approx(loss_service.combine(report.per_term, cfg))
    assert report.total == pytest.approx(sum(report.per_stage))
    assert len(report.summary()["gradient_norms"]) == 2


def test_total_loss_errors(hands, hands_scene):
    rng = np.random.default_rng(4)
    target = random_fieldset(rng)
    enc_cfg = EncoderConfig(f_d=8)
    with pytest.raises(ConfigError):
        loss_service.total_loss([random_stage(rng)], target, hands_scene, hands, enc_cfg, LossConfig(beta_schedule=(0.5, 1.0)))

    stage = random_stage(rng)
    stage.ps_heatmaps = None
    with pytest.raises(DimensionError):
        loss_service.total_loss([stage], target, hands_scene, hands, enc_cfg, LossConfig(beta_schedule=(1.0,)))

    stage = random_stage(rng)
    stage.pafs = np.zeros((4, 4, 4))
    with pytest.raises(DimensionError):
        loss_service.total_loss([stage], target, hands_scene, hands, enc_cfg, LossConfig(beta_schedule=(1.0,)))
