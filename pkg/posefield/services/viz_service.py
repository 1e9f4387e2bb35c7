from __future__ import annotations

import io
from collections.abc import Sequence
from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.figure import Figure

from posefield.schemas.decoder import DecodedPose
from posefield.schemas.fields import FieldTensor
from posefield.schemas.skeleton import Scene, SkeletonSpec
from posefield.services.storage_service import storage_service

SVG_HASH_SALT = "posefield"
DPI = 72
GT_COLOR = "#1f77b4"


class VizService:
    def _limb_colors(self, spec: SkeletonSpec) -> list[tuple[float, float, float, float]]:
        palette = matplotlib.colormaps["hsv"]
        count = max(spec.num_limbs, 1)
        return [palette(index / count) for index in range(spec.num_limbs)]

    def render_svg(
        self,
        scene: Scene,
        spec: SkeletonSpec,
        *,
        detections: Sequence[DecodedPose] = (),
        heatmaps: FieldTensor | None = None,
    ) -> str:
        """Self-contained SVG: optional joint-heat overlay, ground truth as rings, detections as colored limbs."""
        width, height = scene.image_size
        figure = Figure(figsize=(width / DPI, height / DPI), dpi=DPI)
        axes = figure.add_axes((0.0, 0.0, 1.0, 1.0))
        axes.set_xlim(0, width)
        axes.set_ylim(height, 0)
        axes.set_axis_off()

        if heatmaps is not None:
            joint_heat = np.asarray(heatmaps.data[: spec.num_joints]).max(axis=0) if spec.num_joints else None
            if joint_heat is not None:
                grid_h, grid_w = joint_heat.shape
                axes.imshow(
                    joint_heat,
                    cmap="magma",
                    vmin=0.0,
                    vmax=1.0,
                    alpha=0.5,
                    interpolation="nearest",
                    extent=(0, grid_w * heatmaps.f_d, grid_h * heatmaps.f_d, 0),
                )

        for person in scene.persons:
            points = [(joint.x, joint.y) for joint in person.joints if joint is not None]
            if points:
                xs, ys = zip(*points)
                axes.scatter(xs, ys, s=30, facecolors="none", edgecolors=GT_COLOR, linewidths=1.0)

        colors = self._limb_colors(spec)
        for pose in detections:
            for limb_index, (parent, child) in enumerate(spec.limbs):
                start, end = pose.joints[parent], pose.joints[child]
                if start is None or end is None:
                    continue
                axes.plot((start[0], end[0]), (start[1], end[1]), color=colors[limb_index], linewidth=2.0)
            present = [joint for joint in pose.joints if joint is not None]
            if present:
                axes.scatter([joint[0] for joint in present], [joint[1] for joint in present], s=12, color="white", edgecolors="black", linewidths=0.5, zorder=3)

        buffer = io.StringIO()
        with matplotlib.rc_context({"svg.hashsalt": SVG_HASH_SALT, "svg.fonttype": "none"}):
            figure.savefig(buffer, format="svg", metadata={"Date": None})
        return buffer.getvalue()

    def write_svg(self, svg: str, path: str | Path) -> int:
        return storage_service.atomic_write_text(path, svg)


viz_service = VizService()
