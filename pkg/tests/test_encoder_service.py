from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from posefield.schemas.encoder import EncoderConfig, HeatmapCombine
from posefield.schemas.fields import output_grid
from posefield.services.encoder_service import cell_centers, encoder_service
from tests.conftest import make_scene


def test_output_grid_rounds_up():
    assert output_grid((100, 60), 8) == (8, 13)
    assert output_grid((64, 64), 8) == (8, 8)


def test_cell_centers_are_half_cell_shifted():
    xs, ys = cell_centers((2, 3), 8)
    assert xs.tolist() == [[4.0, 12.0, 20.0]]
    assert ys.tolist() == [[4.0], [12.0]]


def test_unsupported_downsample_factor_is_rejected():
    with pytest.raises(ValueError):
        EncoderConfig(f_d=3)


def test_joint_on_cell_center_gives_one(spec, enc_cfg):
    scene = make_scene(spec, [{"nose": (20.0, 20.0)}], size=(64, 64))
    heat = encoder_service.encode_heatmaps(scene, spec, enc_cfg).data
    assert heat[spec.joint_index("nose"), 2, 2] == pytest.approx(1.0)


def test_joint_sigma_away_gives_inverse_e(spec, enc_cfg):
    scene = make_scene(spec, [{"nose": (27.0, 20.0)}], size=(64, 64))
    heat = encoder_service.encode_heatmaps(scene, spec, enc_cfg).data
    assert heat[spec.joint_index("nose"), 2, 2] == pytest.approx(math.exp(-1.0), abs=1e-6)


def test_coincident_joints_are_clamped(spec, enc_cfg):
    scene = make_scene(spec, [{"nose": (20.0, 20.0)}, {"nose": (20.0, 20.0)}], size=(64, 64))
    heat = encoder_service.encode_heatmaps(scene, spec, enc_cfg).data
    assert heat[spec.joint_index("nose"), 2, 2] == pytest.approx(1.0)
    assert heat.max() <= 1.0


def test_max_combine_keeps_the_larger_peak(spec):
    cfg = EncoderConfig(heatmap_combine=HeatmapCombine.MAX)
    scene = make_scene(spec, [{"nose": (20.0, 20.0)}, {"nose": (27.0, 20.0)}], size=(64, 64))
    heat = encoder_service.encode_heatmaps(scene, spec, cfg).data
    assert heat[spec.joint_index("nose"), 2, 2] == pytest.approx(1.0)


def test_background_is_one_minus_joint_max(spec, enc_cfg):
    scene = make_scene(spec, [{"nose": (20.0, 20.0), "neck": (40.0, 44.0)}], size=(64, 64))
    heat = encoder_service.encode_heatmaps(scene, spec, enc_cfg).data
    expected = 1.0 - heat[: spec.num_joints].max(axis=0)
    np.testing.assert_allclose(heat[spec.num_joints], expected, atol=1e-6)


def test_horizontal_limb_field(spec, enc_cfg):
    scene = make_scene(spec, [{"right_shoulder": (0.0, 8.0), "right_elbow": (80.0, 8.0)}], size=(128, 64))
    limb = spec.limbs.index((spec.joint_index("right_shoulder"), spec.joint_index("right_elbow")))
    pafs = encoder_service.encode_pafs(scene, spec, enc_cfg).data
    assert (pafs[2 * limb, 0, 3], pafs[2 * limb + 1, 0, 3]) == (1.0, 0.0)
    assert (pafs[2 * limb, 7, 15], pafs[2 * limb + 1, 7, 15]) == (0.0, 0.0)


def test_diagonal_limb_field(spec, enc_cfg):
    scene = make_scene(spec, [{"right_shoulder": (0.0, 0.0), "right_elbow": (30.0, 40.0)}], size=(64, 64))
    limb = spec.limbs.index((spec.joint_index("right_shoulder"), spec.joint_index("right_elbow")))
    pafs = encoder_service.encode_pafs(scene, spec, enc_cfg).data
    assert pafs[2 * limb, 2, 1] == pytest.approx(0.6)
    assert pafs[2 * limb + 1, 2, 1] == pytest.approx(0.8)


def test_degenerate_limb_is_skipped(spec, enc_cfg, caplog):
    scene = make_scene(spec, [{"right_shoulder": (20.0, 20.0), "right_elbow": (20.0, 20.0)}], size=(64, 64))
    pafs = encoder_service.encode_pafs(scene, spec, enc_cfg).data
    assert not pafs.any()
    assert "degenerate limbs skipped" in caplog.text


def test_offset_points_back_to_joint(spec, enc_cfg):
    nose = spec.joint_index("nose")
    scene = make_scene(spec, [{"nose": (20.0, 20.0)}], size=(64, 64))
    offsets = encoder_service.encode_scene(scene, spec, enc_cfg).offsets.data
    assert offsets[2 * nose, 2, 2] == 0.0

    scene = make_scene(spec, [{"nose": (18.0, 20.0)}], size=(64, 64))
    offsets = encoder_service.encode_scene(scene, spec, enc_cfg).offsets.data
    assert offsets[2 * nose, 2, 2] == pytest.approx(-0.25)
    assert offsets[2 * nose + 1, 2, 2] == pytest.approx(0.0)


def test_neighbor_offset_is_clamped(spec):
    cfg = EncoderConfig(sigma_heat=20.0)
    nose = spec.joint_index("nose")
    scene = make_scene(spec, [{"nose": (18.0, 20.0)}], size=(64, 64))
    offsets = encoder_service.encode_scene(scene, spec, cfg).offsets.data
    assert offsets[2 * nose, 2, 3] == pytest.approx(-0.5)


def test_empty_scene(spec, enc_cfg):
    fields = encoder_service.encode_scene(make_scene(spec, [], size=(40, 24)), spec, enc_cfg)
    assert fields.grid == (3, 5)
    assert not fields.heatmaps.data[: spec.num_joints].any()
    assert (fields.heatmaps.data[spec.num_joints] == 1.0).all()
    assert not fields.pafs.data.any()
    assert not fields.offsets.data.any()


def test_offset_mask_matches_heatmap_threshold(spec, enc_cfg):
    points = {"neck": (60.0, 40.0), "right_shoulder": (44.0, 42.0), "right_elbow": (36.0, 70.0), "nose": (61.0, 22.0)}
    fields = encoder_service.encode_scene(make_scene(spec, [points]), spec, enc_cfg)
    for name in points:
        channel = spec.joint_index(name)
        mask = fields.heatmaps.data[channel] > enc_cfg.offset_validity
        nonzero = (fields.offsets.data[2 * channel] != 0) | (fields.offsets.data[2 * channel + 1] != 0)
        assert not (nonzero & ~mask).any()


def test_separated_persons_superpose(spec, enc_cfg):
    left = {"neck": (20.0, 20.0), "right_shoulder": (12.0, 22.0), "nose": (21.0, 10.0)}
    right = {"neck": (100.0, 100.0), "right_shoulder": (92.0, 102.0), "nose": (101.0, 90.0)}
    both = encoder_service.encode_scene(make_scene(spec, [left, right]), spec, enc_cfg)
    one = encoder_service.encode_scene(make_scene(spec, [left]), spec, enc_cfg)
    two = encoder_service.encode_scene(make_scene(spec, [right]), spec, enc_cfg)
    joints = slice(0, spec.num_joints)
    np.testing.assert_allclose(
        both.heatmaps.data[joints],
        np.minimum(one.heatmaps.data[joints] + two.heatmaps.data[joints], 1.0),
        atol=1e-6,
    )
    np.testing.assert_allclose(both.pafs.data, one.pafs.data + two.pafs.data, atol=1e-6)


@settings(max_examples=40, deadline=None)
@given(
    x0=st.floats(0, 127), y0=st.floats(0, 127), x1=st.floats(0, 127), y1=st.floats(0, 127),
    f_d=st.sampled_from([4, 8, 16]),
)
def test_field_ranges(spec, x0, y0, x1, y1, f_d):
    cfg = EncoderConfig(f_d=f_d)
    scene = make_scene(spec, [{"right_shoulder": (x0, y0), "right_elbow": (x1, y1)}])
    fields = encoder_service.encode_scene(scene, spec, cfg)
    heat = fields.heatmaps.data
    assert heat.min() >= 0.0 and heat.max() <= 1.0
    pafs = fields.pafs.data.reshape(spec.num_limbs, 2, *fields.grid)
    norms = np.hypot(pafs[:, 0], pafs[:, 1])
    assert np.all((norms < 1e-6) | (np.abs(norms - 1.0) < 1e-5))
    assert np.abs(fields.offsets.data).max() <= 0.5


def test_overlapping_same_limbs_average_then_renormalize(spec, enc_cfg):
    limb = spec.limbs.index((spec.joint_index("right_shoulder"), spec.joint_index("right_elbow")))
    across = {"right_shoulder": (4.0, 20.0), "right_elbow": (60.0, 20.0)}
    down = {"right_shoulder": (20.0, 4.0), "right_elbow": (20.0, 60.0)}
    pafs = encoder_service.encode_pafs(make_scene(spec, [across, down], size=(64, 64)), spec, enc_cfg).data
    assert pafs[2 * limb, 2, 2] == pytest.approx(math.sqrt(0.5))
    assert pafs[2 * limb + 1, 2, 2] == pytest.approx(math.sqrt(0.5))
    assert (pafs[2 * limb, 2, 5], pafs[2 * limb + 1, 2, 5]) == (1.0, 0.0)
    assert (pafs[2 * limb, 5, 2], pafs[2 * limb + 1, 5, 2]) == (0.0, 1.0)
    norms = np.hypot(pafs[2 * limb], pafs[2 * limb + 1])
    assert np.all((np.abs(norms - 1.0) < 1e-6) | (norms == 0.0))


@pytest.mark.parametrize(("cols", "rows"), [(1, 0), (0, 1), (2, 1), (3, 2)])
def test_whole_cell_shift_moves_fields_exactly(spec, enc_cfg, cols, rows):
    first = {"neck": (40.5, 30.0), "right_shoulder": (30.25, 32.0), "right_elbow": (26.0, 52.5), "nose": (41.0, 18.75)}
    second = {"neck": (70.0, 60.5), "left_shoulder": (80.5, 61.0), "left_elbow": (84.25, 80.0)}
    dx, dy = cols * enc_cfg.f_d, rows * enc_cfg.f_d

    def moved(points):
        return {name: (x + dx, y + dy) for name, (x, y) in points.items()}

    base = encoder_service.encode_scene(make_scene(spec, [first, second]), spec, enc_cfg)
    shifted = encoder_service.encode_scene(make_scene(spec, [moved(first), moved(second)]), spec, enc_cfg)
    height, width = base.grid
    for before, after in zip((base.heatmaps, base.pafs, base.offsets), (shifted.heatmaps, shifted.pafs, shifted.offsets)):
        assert np.array_equal(after.data[:, rows:, cols:], before.data[:, : height - rows, : width - cols])
