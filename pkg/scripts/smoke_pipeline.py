import tempfile
from pathlib import Path

from posefield.schemas.decoder import DecoderConfig, Matcher
from posefield.schemas.encoder import EncoderConfig
from posefield.schemas.losses import LossConfig
from posefield.services.decoder_service import decoder_service
from posefield.services.encoder_service import encoder_service
from posefield.services.evaluation_service import evaluation_service
from posefield.services.field_codec_service import field_codec_service
from posefield.services.loss_service import loss_service
from posefield.services.skeleton_service import skeleton_service
from posefield.services.synth_service import synth_service


def run() -> None:
    spec = skeleton_service.default_coco_skeleton()
    assert spec.heatmap_channels == 19, spec.heatmap_channels
    assert spec.offset_channels == 36, spec.offset_channels

    scenes = [
        synth_service.random_scene(seed, 1, (256, 256), spec, 16.0, image_id=seed + 1) for seed in range(3)
    ]
    scenes = skeleton_service.ingest_coco(skeleton_service.serialize_coco(scenes, spec), spec)
    assert [scene.image_id for scene in scenes] == [1, 2, 3], [scene.image_id for scene in scenes]

    enc_cfg = EncoderConfig(f_d=8)
    detections = {}
    with tempfile.TemporaryDirectory(prefix="posefield-smoke-") as tmp:
        for scene in scenes:
            fields = encoder_service.encode_scene(scene, spec, enc_cfg)
            directory = Path(tmp) / f"{scene.image_id:06d}"
            field_codec_service.write_fieldset(fields, directory, sidecar={"image_id": scene.image_id})
            restored, sidecar, _ = field_codec_service.read_fieldset(directory)
            assert sidecar["image_id"] == scene.image_id, sidecar
            assert (restored.heatmaps.data == fields.heatmaps.data).all()

            for matcher in (Matcher.GREEDY, Matcher.EXACT):
                poses = decoder_service.decode(restored, spec, DecoderConfig(matcher=matcher))
                assert len(poses) == 1, (scene.image_id, matcher, len(poses))
            detections[scene.image_id] = poses

            stages = [(fields, fields.heatmaps.data)] * 3
            cfg = LossConfig(beta_schedule=tuple(loss_service.pdd_schedule("quadratic_b", 3)))
            report = loss_service.total_loss(stages, fields, scene, spec, enc_cfg, cfg)
            assert report.total == 0.0, report.summary()

    result = evaluation_service.evaluate(scenes, detections, spec)
    assert abs(result.ap - 1.0) < 1e-9, result.summary()
    assert abs(result.ar - 1.0) < 1e-9, result.summary()


if __name__ == "__main__":
    run()
