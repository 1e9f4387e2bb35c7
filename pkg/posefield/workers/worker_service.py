from __future__ import annotations

import logging
from collections.abc import Callable, Sequence
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from time import perf_counter

from posefield.services.observability_metrics_service import observability_metrics_service
from posefield.workers.models import WorkerJobType

WorkerHandler = Callable[[dict], dict]
logger = logging.getLogger(__name__)


def _handle_encode(payload: dict) -> dict:
    from posefield.services.encoder_service import encoder_service
    from posefield.services.field_codec_service import field_codec_service

    scene = payload["scene"]
    fields = encoder_service.encode_scene(scene, payload["spec"], payload["encoder"])
    written = field_codec_service.write_fieldset(fields, payload["out_dir"], sidecar=payload["sidecar"])
    return {"image_id": scene.image_id, "bytes": written, "directory": str(payload["out_dir"])}


def _handle_decode(payload: dict) -> dict:
    from posefield.services.decoder_service import decoder_service
    from posefield.services.field_codec_service import field_codec_service

    fields, sidecar, _ = field_codec_service.read_fieldset(payload["directory"])
    poses = decoder_service.decode(fields, payload["spec"], payload["decoder"])
    return {"image_id": int(sidecar.get("image_id", payload.get("image_id", 0))), "poses": poses}


def _handle_viz(payload: dict) -> dict:
    from posefield.services.viz_service import viz_service

    svg = viz_service.render_svg(
        payload["scene"],
        payload["spec"],
        detections=payload.get("detections", ()),
        heatmaps=payload.get("heatmaps"),
    )
    written = viz_service.write_svg(svg, Path(payload["out_path"]))
    return {"image_id": payload["scene"].image_id, "bytes": written, "path": str(payload["out_path"])}


def _handle_bench(payload: dict) -> dict:
    from posefield.services.synth_service import synth_service

    errors = synth_service.bench_trial_errors(
        payload["f_d"],
        payload["kernel"],
        payload["seeds"],
        sigma_cells=payload["sigma_cells"],
        grid_cells=payload["grid_cells"],
        subpixel=payload["subpixel"],
    )
    return {"errors": errors}


HANDLERS: dict[WorkerJobType, WorkerHandler] = {
    WorkerJobType.ENCODE: _handle_encode,
    WorkerJobType.DECODE: _handle_decode,
    WorkerJobType.VIZ: _handle_viz,
    WorkerJobType.BENCH: _handle_bench,
}


def run_job(job_type: WorkerJobType, payload: dict) -> dict:
    started_at = perf_counter()
    success = False
    try:
        result = HANDLERS[job_type](payload)
        success = True
        return result
    finally:
        observability_metrics_service.record(
            component="worker",
            operation=job_type.value,
            success=success,
            latency_ms=(perf_counter() - started_at) * 1000,
        )


class WorkerService:
    def run_batch(self, job_type: WorkerJobType, payloads: Sequence[dict], jobs: int = 1) -> list[dict]:
        """Run one job per payload; results come back in payload order whatever ``jobs`` is."""
        started_at = perf_counter()
        success = False
        workers = max(1, min(int(jobs), len(payloads) or 1))
        try:
            if workers == 1:
                results = [run_job(job_type, payload) for payload in payloads]
            else:
                with ProcessPoolExecutor(max_workers=workers) as pool:
                    results = list(pool.map(run_job, [job_type] * len(payloads), payloads))
            success = True
            logger.info(
                "worker batch finished",
                extra={
                    "context": {
                        "component": "worker",
                        "event": "batch_success",
                        "job_type": job_type.value,
                        "jobs": workers,
                        "count": len(payloads),
                    }
                },
            )
            return results
        finally:
            observability_metrics_service.record(
                component="worker",
                operation=f"batch_{job_type.value}",
                success=success,
                latency_ms=(perf_counter() - started_at) * 1000,
                items=len(payloads),
            )


worker_service = WorkerService()
