import tempfile
from pathlib import Path

from posefield.core.errors import FieldFormatError
from posefield.schemas.decoder import DecoderConfig
from posefield.schemas.encoder import EncoderConfig
from posefield.services.observability_metrics_service import observability_metrics_service
from posefield.services.skeleton_service import skeleton_service
from posefield.services.synth_service import synth_service
from posefield.workers.models import WorkerJobType
from posefield.workers.worker_service import worker_service


def run() -> None:
    observability_metrics_service.reset()
    spec = skeleton_service.default_coco_skeleton()
    with tempfile.TemporaryDirectory(prefix="posefield-worker-") as tmp:
        root = Path(tmp)
        scenes = [synth_service.random_scene(seed, 1, (192, 192), spec, 16.0, image_id=seed + 1) for seed in range(4)]
        encode = [
            {
                "scene": scene,
                "spec": spec,
                "encoder": EncoderConfig(f_d=8),
                "out_dir": str(root / f"{scene.image_id:06d}"),
                "sidecar": {"image_id": scene.image_id},
            }
            for scene in scenes
        ]
        encoded = worker_service.run_batch(WorkerJobType.ENCODE, encode, jobs=2)
        assert [item["image_id"] for item in encoded] == [1, 2, 3, 4], encoded

        decode = [{"directory": item["directory"], "spec": spec, "decoder": DecoderConfig()} for item in encoded]
        inline = worker_service.run_batch(WorkerJobType.DECODE, decode, jobs=1)
        pooled = worker_service.run_batch(WorkerJobType.DECODE, decode, jobs=2)
        assert [item["poses"] for item in inline] == [item["poses"] for item in pooled]

        broken = root / "broken"
        broken.mkdir()
        for name in ("heatmaps", "pafs", "offsets"):
            (broken / f"{name}.pft").write_bytes(b"")
        try:
            worker_service.run_batch(WorkerJobType.DECODE, [{**decode[0], "directory": str(broken)}], jobs=1)
        except FieldFormatError as exc:
            assert exc.offset == 0, exc.offset
        else:
            raise AssertionError("empty field file decoded")

    counters = observability_metrics_service.snapshot()["counters"]
    assert counters["worker.encode.success"] == 4, counters
    assert counters["worker.decode.failed"] == 1, counters


if __name__ == "__main__":
    run()
