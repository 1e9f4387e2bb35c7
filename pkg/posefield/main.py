from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import re
import sys
from collections.abc import Callable, Sequence
from pathlib import Path
from time import perf_counter
from typing import TypeVar

from numpy.random import SeedSequence
from pydantic import ValidationError

from posefield import __version__
from posefield.core.config import load_config_file, settings
from posefield.core.errors import AnnotationParseError, AnnotationReferenceError, ConfigError, PoseFieldError
from posefield.core.logging import setup_logging
from posefield.schemas.decoder import DecodedPose, DecoderConfig
from posefield.schemas.encoder import EncoderConfig
from posefield.schemas.losses import PddScheduleKind, LossConfig, StagePrediction
from posefield.schemas.skeleton import Scene, SkeletonSpec
from posefield.schemas.synth import UpsampleKernel
from posefield.services.decoder_service import decoder_service
from posefield.services.evaluation_service import evaluation_service
from posefield.services.field_codec_service import SIDECAR_NAME, field_codec_service
from posefield.services.loss_service import loss_service
from posefield.services.observability_metrics_service import observability_metrics_service
from posefield.services.skeleton_service import skeleton_service
from posefield.services.storage_service import storage_service
from posefield.services.synth_service import synth_service
from posefield.workers.models import WorkerJobType
from posefield.workers.worker_service import worker_service

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3

BENCH_COLUMNS = ("f_d", "kernel", "trials", "mean_px", "p95_px", "seed", "prng")
SECTIONS = {
    "encoder": set(EncoderConfig.model_fields),
    "decoder": set(DecoderConfig.model_fields),
    "loss": set(LossConfig.model_fields),
}
EXTRA_KEYS = {"include_ear_shoulder"}
STAGE_SUFFIX = re.compile(r"(\d+)$")

T = TypeVar("T")


def parse_image_size(text: str) -> tuple[int, int]:
    try:
        width, height = (int(part) for part in text.lower().split("x"))
    except ValueError:
        raise ConfigError(f"image size must look like WxH, got '{text}'") from None
    if width <= 0 or height <= 0:
        raise ConfigError(f"image size must be positive, got '{text}'")
    return width, height


def read_config(path: str | None) -> dict[str, str]:
    if not path:
        return {}
    values = load_config_file(path)
    known = set().union(*SECTIONS.values()) | EXTRA_KEYS
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys in {path}: {', '.join(unknown)}")
    return values


def _section(values: dict[str, str], name: str) -> dict[str, str]:
    return {key: value for key, value in values.items() if key in SECTIONS[name]}


def _validated(model: type, data: dict, origin: str):
    try:
        return model(**data)
    except ValidationError as exc:
        error = exc.errors()[0]
        key = ".".join(str(part) for part in error.get("loc", ())) or origin
        raise ConfigError(f"invalid {origin} setting '{key}': {error['msg']}") from exc


def build_skeleton(values: dict[str, str]) -> SkeletonSpec:
    flag = values.get("include_ear_shoulder", "false").strip().lower()
    return skeleton_service.default_coco_skeleton(include_ear_shoulder=flag in {"1", "true", "yes"})


def build_encoder_config(values: dict[str, str], **overrides) -> EncoderConfig:
    data = {
        "f_d": settings.ENCODER_FD,
        "sigma_heat": settings.ENCODER_SIGMA_HEAT,
        "limb_halfwidth": settings.ENCODER_LIMB_HALFWIDTH,
        "offset_validity": settings.ENCODER_OFFSET_VALIDITY,
        "heatmap_combine": settings.ENCODER_HEATMAP_COMBINE,
    }
    data.update(_section(values, "encoder"))
    data.update({key: value for key, value in overrides.items() if value is not None})
    return _validated(EncoderConfig, data, "encoder")


def build_decoder_config(values: dict[str, str], **overrides) -> DecoderConfig:
    data = {
        "peak_threshold": settings.DECODER_PEAK_THRESHOLD,
        "num_samples": settings.DECODER_NUM_SAMPLES,
        "bias_threshold": settings.DECODER_BIAS_THRESHOLD,
        "min_aligned_fraction": settings.DECODER_MIN_ALIGNED_FRACTION,
        "matcher": settings.DECODER_MATCHER,
        "use_offsets": settings.DECODER_USE_OFFSETS,
        "bilinear_pafs": settings.DECODER_BILINEAR_PAFS,
    }
    data.update(_section(values, "decoder"))
    data.update({key: value for key, value in overrides.items() if value is not None})
    return _validated(DecoderConfig, data, "decoder")


def resolve_beta_schedule(text: str, num_stages: int) -> tuple[tuple[float, ...], str | None]:
    """A schedule name stretched to ``num_stages``, or an explicit comma list."""
    name = text.strip().lower()
    if name in {kind.value for kind in PddScheduleKind}:
        if num_stages == 1:
            return (1.0,), name
        return tuple(loss_service.pdd_schedule(name, num_stages)), name
    try:
        values = tuple(float(part) for part in name.split(",") if part.strip())
    except ValueError:
        raise ConfigError(f"beta_schedule must be a schedule name or a comma list of floats, got '{text}'") from None
    return values, None


def build_loss_config(values: dict[str, str], num_stages: int) -> tuple[LossConfig, str | None]:
    data: dict = {
        "gamma": settings.LOSS_GAMMA,
        "alpha": settings.LOSS_ALPHA,
        "kl_epsilon": settings.LOSS_KL_EPSILON,
        "offset_mask_threshold": settings.LOSS_OFFSET_MASK_THRESHOLD,
        "pdd_high": settings.LOSS_PDD_HIGH,
        "pdd_low": settings.LOSS_PDD_LOW,
        "salm_profile": settings.LOSS_SALM_PROFILE,
        "self_supervision": settings.LOSS_SELF_SUPERVISION,
        "self_supervision_mode": settings.LOSS_SELF_SUPERVISION_MODE,
    }
    data.update(_section(values, "loss"))
    schedule, name = resolve_beta_schedule(str(data.pop("beta_schedule", settings.LOSS_BETA_SCHEDULE)), num_stages)
    data["beta_schedule"] = schedule
    return _validated(LossConfig, data, "loss"), name


def _parse_document(path: str, parse: Callable[[bytes], T]) -> T:
    raw = Path(path).read_bytes()
    try:
        return parse(raw)
    except (AnnotationParseError, AnnotationReferenceError) as exc:
        raise type(exc)(f"{path}: {exc}") from exc


def load_scenes(path: str, spec: SkeletonSpec) -> list[Scene]:
    return _parse_document(path, lambda raw: skeleton_service.ingest_coco(raw, spec))


def load_detections(path: str, spec: SkeletonSpec) -> dict[int, list[DecodedPose]]:
    return _parse_document(path, lambda raw: decoder_service.read_detections(raw, spec))


def _stage_order(directory: Path) -> tuple[int, str]:
    match = STAGE_SUFFIX.search(directory.name)
    return (int(match.group(1)) if match else -1, directory.name)


def bundle_directories(root: Path) -> list[Path]:
    if (root / "heatmaps.pft").exists():
        return [root]
    if not root.is_dir():
        raise FileNotFoundError(f"fields directory not found: {root}")
    bundles = [child for child in root.iterdir() if child.is_dir() and (child / "heatmaps.pft").exists()]
    return sorted(bundles, key=_stage_order)


def emit(text: str, out: str | None) -> None:
    if out:
        storage_service.atomic_write_text(out, text if text.endswith("\n") else text + "\n")
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def cmd_encode(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    enc_cfg = build_encoder_config(values, f_d=args.fd)
    scenes = load_scenes(args.ann, spec)
    if args.image_size:
        size = parse_image_size(args.image_size)
        scenes = [_validated(Scene, {**scene.model_dump(), "image_size": size}, "scene") for scene in scenes]

    out_dir = Path(args.out)
    payloads = [
        {
            "scene": scene,
            "spec": spec,
            "encoder": enc_cfg,
            "out_dir": str(out_dir / f"{scene.image_id:06d}"),
            "sidecar": {
                "image_id": scene.image_id,
                "image_size": list(scene.image_size),
                "f_d": enc_cfg.f_d,
                "joint_names": list(spec.joint_names),
                "limbs": [list(limb) for limb in spec.limbs],
                "include_ear_shoulder": spec.num_limbs > 17,
                "scene": scene.model_dump(mode="json"),
            },
        }
        for scene in scenes
    ]
    results = worker_service.run_batch(WorkerJobType.ENCODE, payloads, jobs=args.jobs)
    persons = sum(len(scene.persons) for scene in scenes)
    print(f"encoded {len(results)} images ({persons} persons) at f_d={enc_cfg.f_d} -> {out_dir}")
    return EXIT_OK


def cmd_decode(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    dec_cfg = build_decoder_config(
        values,
        matcher=args.matcher,
        use_offsets=False if args.no_offsets else None,
        bilinear_pafs=True if args.bilinear_pafs else None,
    )
    directories = bundle_directories(Path(args.fields))
    payloads = [{"directory": str(directory), "spec": spec, "decoder": dec_cfg} for directory in directories]
    results = worker_service.run_batch(WorkerJobType.DECODE, payloads, jobs=args.jobs)

    detections: dict[int, list] = {}
    for result in results:
        detections.setdefault(result["image_id"], []).extend(result["poses"])
    storage_service.atomic_write_text(args.out, decoder_service.write_detections(detections, spec))
    total = sum(len(poses) for poses in detections.values())
    print(f"decoded {len(results)} field sets into {total} poses -> {args.out}")
    return EXIT_OK


def _read_stage(directory: Path) -> StagePrediction:
    fields, _, ps_heatmaps = field_codec_service.read_fieldset(directory)
    return StagePrediction(
        heatmaps=fields.heatmaps.data,
        pafs=fields.pafs.data,
        offsets=fields.offsets.data,
        ps_heatmaps=None if ps_heatmaps is None else ps_heatmaps.data,
    )


def cmd_loss(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    target_fields, sidecar, _ = field_codec_service.read_fieldset(args.target)
    if "scene" not in sidecar:
        raise ConfigError(f"{Path(args.target) / SIDECAR_NAME} carries no scene; re-encode the target")
    scene = _validated(Scene, sidecar["scene"], "scene")
    enc_cfg = build_encoder_config(values, f_d=target_fields.f_d)

    stages = [_read_stage(directory) for directory in bundle_directories(Path(args.pred))]
    if not stages:
        raise ConfigError(f"no prediction field sets under {args.pred}")
    cfg, schedule_name = build_loss_config(values, len(stages))
    if cfg.self_supervision and any(stage.ps_heatmaps is None for stage in stages):
        logger.warning(
            "prediction has no PAF-branch heatmaps; self-supervision terms skipped",
            extra={"context": {"component": "cli", "event": "loss_no_ps", "pred": args.pred}},
        )
        cfg = cfg.model_copy(update={"self_supervision": False})

    report = loss_service.total_loss(stages, target_fields, scene, spec, enc_cfg, cfg)
    summary = report.summary()
    summary["config"] = {
        "gamma": cfg.gamma,
        "delta": cfg.delta,
        "alpha": cfg.alpha,
        "beta": schedule_name or "custom",
        "beta_schedule": list(cfg.beta_schedule),
        "salm_profile": cfg.salm_profile.value,
        "self_supervision": cfg.self_supervision,
        "self_supervision_mode": cfg.self_supervision_mode.value,
    }
    emit(json.dumps(summary, indent=1, sort_keys=True), args.out)
    return EXIT_OK


def cmd_bench(args: argparse.Namespace, values: dict[str, str]) -> int:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=BENCH_COLUMNS, lineterminator="\n")
    writer.writeheader()
    for f_d in args.fd:
        for kernel in args.kernel:
            result = synth_service.bench_upsample_error(
                f_d, kernel, args.trials, args.seed, subpixel=args.subpixel, jobs=args.jobs
            )
            writer.writerow(result.as_row())
    emit(buffer.getvalue(), args.out)
    return EXIT_OK


def cmd_eval(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    scenes = load_scenes(args.ann, spec)
    detections = load_detections(args.detections, spec)
    result = evaluation_service.evaluate(scenes, detections, spec)
    emit(evaluation_service.report(result), args.out)
    if args.pr_csv:
        storage_service.atomic_write_text(args.pr_csv, evaluation_service.write_pr_csv(result))
    return EXIT_OK


def cmd_viz(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    scenes = load_scenes(args.ann, spec)
    detections = (
        load_detections(args.detections, spec) if args.detections else {}
    )
    heatmaps: dict[int, object] = {}
    if args.fields:
        for directory in bundle_directories(Path(args.fields)):
            fields, sidecar, _ = field_codec_service.read_fieldset(directory)
            heatmaps[int(sidecar.get("image_id", 0))] = fields.heatmaps

    out_dir = Path(args.out)
    payloads = [
        {
            "scene": scene,
            "spec": spec,
            "detections": tuple(detections.get(scene.image_id, ())),
            "heatmaps": heatmaps.get(scene.image_id),
            "out_path": str(out_dir / f"{scene.image_id:06d}.svg"),
        }
        for scene in scenes
    ]
    results = worker_service.run_batch(WorkerJobType.VIZ, payloads, jobs=args.jobs)
    print(f"rendered {len(results)} images -> {out_dir}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace, values: dict[str, str]) -> int:
    spec = build_skeleton(values)
    image_size = parse_image_size(args.image_size)
    min_separation = args.min_separation
    if min_separation is None:
        min_separation = 2.0 * build_encoder_config(values).f_d
    children = SeedSequence(args.seed).spawn(args.images)
    scenes = [
        synth_service.random_scene(
            int(child.generate_state(1)[0]), args.persons, image_size, spec, min_separation, image_id=index + 1
        )
        for index, child in enumerate(children)
    ]
    storage_service.atomic_write_text(args.out, skeleton_service.serialize_coco(scenes, spec))
    print(f"synthesized {len(scenes)} images with {args.persons} persons each -> {args.out}")
    return EXIT_OK


COMMANDS = {
    "encode": cmd_encode,
    "decode": cmd_decode,
    "loss": cmd_loss,
    "bench": cmd_bench,
    "eval": cmd_eval,
    "viz": cmd_viz,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="posefield", description="Pose field encoding, decoding, losses and benchmarks.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--config", help="flat key=value config file")
    parser.add_argument("--jobs", type=int, default=settings.WORKER_JOBS, help="parallel per-image workers")
    parser.add_argument("--metrics", help="write Prometheus metrics to this path")
    parser.add_argument("--log-json", dest="log_json", action=argparse.BooleanOptionalAction, default=None)
    commands = parser.add_subparsers(dest="command", required=True)

    encode = commands.add_parser("encode", help="render annotations into field tensors")
    encode.add_argument("--ann", required=True)
    encode.add_argument("--image-size")
    encode.add_argument("--fd", type=int)
    encode.add_argument("--out", required=True)

    decode = commands.add_parser("decode", help="decode field tensors into COCO detections")
    decode.add_argument("--fields", required=True)
    decode.add_argument("--out", required=True)
    decode.add_argument("--no-offsets", action="store_true")
    decode.add_argument("--bilinear-pafs", action="store_true")
    decode.add_argument("--matcher", choices=("greedy", "exact"))

    loss = commands.add_parser("loss", help="score predicted fields against a target")
    loss.add_argument("--pred", required=True)
    loss.add_argument("--target", required=True)
    loss.add_argument("--out")

    bench = commands.add_parser("bench", help="upsampling localization error benchmark")
    bench.add_argument("--fd", type=int, nargs="+", default=[32])
    bench.add_argument("--kernel", nargs="+", choices=[kernel.value for kernel in UpsampleKernel], default=["bicubic"])
    bench.add_argument("--trials", type=int, default=10_000)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--subpixel", action="store_true")
    bench.add_argument("--out")

    evaluate = commands.add_parser("eval", help="OKS mAP of detections against annotations")
    evaluate.add_argument("--ann", required=True)
    evaluate.add_argument("--detections", required=True)
    evaluate.add_argument("--out")
    evaluate.add_argument("--pr-csv")

    viz = commands.add_parser("viz", help="render SVG overlays")
    viz.add_argument("--ann", required=True)
    viz.add_argument("--detections")
    viz.add_argument("--fields")
    viz.add_argument("--out", required=True)

    synth = commands.add_parser("synth", help="write a synthetic COCO annotation document")
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--images", type=int, default=1)
    synth.add_argument("--persons", type=int, default=1)
    synth.add_argument("--image-size", default="640x480")
    synth.add_argument("--min-separation", type=float)
    synth.add_argument("--out", required=True)

    for command in commands.choices.values():
        command.add_argument("--config", dest="command_config", help="flat key=value config file")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging(json_logs=args.log_json)

    started_at = perf_counter()
    success = False
    try:
        values = read_config(args.command_config or args.config)
        code = COMMANDS[args.command](args, values)
        success = code == EXIT_OK
        return code
    except PoseFieldError as exc:
        logger.error(str(exc), extra={"context": {"component": "cli", "event": "error", "command": args.command}})
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValidationError as exc:
        print(f"error: invalid configuration: {exc.errors()[0]['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    finally:
        observability_metrics_service.record(
            component="cli",
            operation=args.command,
            success=success,
            latency_ms=(perf_counter() - started_at) * 1000,
        )
        if args.metrics:
            storage_service.atomic_write_text(args.metrics, observability_metrics_service.to_prometheus())


if __name__ == "__main__":
    raise SystemExit(main())
