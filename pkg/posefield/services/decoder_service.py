from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from collections.abc import Mapping, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from posefield.core.errors import AnnotationParseError, DimensionError, InvariantViolation
from posefield.schemas.decoder import ConnectionCandidate, DecodedPose, DecoderConfig, JointCandidate, Matcher
from posefield.schemas.fields import FieldSet, FieldTensor
from posefield.schemas.skeleton import SkeletonSpec
from posefield.services.matching_service import matching_service
from posefield.services.observability_metrics_service import observability_metrics_service
from posefield.services.skeleton_service import COCO_KEYPOINT_NAMES

logger = logging.getLogger(__name__)

# Neighbors that precede a cell in (i, j) order; a tie with one of them suppresses the cell.
_EARLIER_NEIGHBORS = ((-1, -1), (-1, 0), (-1, 1), (0, -1))
UNIT_TOLERANCE = 1e-6


class DisjointSet:
    def __init__(self, size: int) -> None:
        self.parents = list(range(size))
        self.ranks = [0] * size

    def find(self, item: int) -> int:
        root = item
        while root != self.parents[root]:
            root = self.parents[root]
        while item != root:
            self.parents[item], item = root, self.parents[item]
        return root

    def union(self, a: int, b: int) -> None:
        root_a, root_b = self.find(a), self.find(b)
        if root_a == root_b:
            return
        if self.ranks[root_a] < self.ranks[root_b]:
            root_a, root_b = root_b, root_a
        self.parents[root_b] = root_a
        if self.ranks[root_a] == self.ranks[root_b]:
            self.ranks[root_a] += 1

    def components(self) -> list[list[int]]:
        groups: dict[int, list[int]] = defaultdict(list)
        for item in range(len(self.parents)):
            groups[self.find(item)].append(item)
        return list(groups.values())


def cell_center(cell: tuple[int, int], f_d: int) -> tuple[float, float]:
    i, j = cell
    return (j + 0.5) * f_d, (i + 0.5) * f_d


class DecoderService:
    def extract_peaks(
        self,
        heatmaps: FieldTensor,
        cfg: DecoderConfig,
        *,
        num_joints: int | None = None,
    ) -> list[JointCandidate]:
        data = heatmaps.data
        channels = data.shape[0] if num_joints is None else num_joints
        if channels > data.shape[0]:
            raise DimensionError(f"heatmaps hold {data.shape[0]} channels, expected at least {channels}")
        center = heatmaps.f_d / 2.0
        peaks: list[JointCandidate] = []

        for channel in range(channels):
            plane = data[channel].astype(np.float64)
            local_max = maximum_filter(plane, size=3, mode="constant", cval=-np.inf)
            mask = (plane >= local_max) & (plane >= cfg.peak_threshold)
            if not mask.any():
                continue
            padded = np.pad(plane, 1, mode="constant", constant_values=-np.inf)
            height, width = plane.shape
            for di, dj in _EARLIER_NEIGHBORS:
                neighbor = padded[1 + di : 1 + di + height, 1 + dj : 1 + dj + width]
                mask &= plane != neighbor
            for i, j in zip(*np.nonzero(mask)):
                cell = (int(i), int(j))
                peaks.append(
                    JointCandidate(
                        joint_type=channel,
                        cell=cell,
                        score=float(plane[i, j]),
                        refined_position=(j * heatmaps.f_d + center, i * heatmaps.f_d + center),
                    )
                )
        return peaks

    def refine_peak(self, candidate: JointCandidate, offsets: FieldTensor, f_d: int) -> JointCandidate:
        i, j = candidate.cell
        channel = 2 * candidate.joint_type
        offset_x = min(max(float(offsets.data[channel, i, j]), -0.5), 0.5)
        offset_y = min(max(float(offsets.data[channel + 1, i, j]), -0.5), 0.5)
        center_x, center_y = cell_center(candidate.cell, f_d)
        return JointCandidate(
            joint_type=candidate.joint_type,
            cell=candidate.cell,
            score=candidate.score,
            refined_position=(center_x + f_d * offset_x, center_y + f_d * offset_y),
        )

    def direction_bias(self, v_f: Sequence[float], v_t: Sequence[float]) -> float:
        """Absolute 2-D cross product |v_f x v_t|; zero when the field runs along the candidate limb."""
        if abs(math.hypot(v_t[0], v_t[1]) - 1.0) > UNIT_TOLERANCE:
            raise InvariantViolation(f"direction_bias needs a unit v_t, got {tuple(v_t)}")
        return abs(float(v_f[0]) * float(v_t[1]) - float(v_f[1]) * float(v_t[0]))

    def _sample_points(self, start: np.ndarray, end: np.ndarray, f_d: int, num_samples: int) -> np.ndarray:
        length = float(np.linalg.norm(end - start))
        margin = f_d / math.sqrt(2.0)
        if length < 2.0 * margin:
            fractions = np.full(num_samples, 0.5)
        else:
            fractions = np.linspace(margin / length, 1.0 - margin / length, num_samples)
        return start[np.newaxis, :] + fractions[:, np.newaxis] * (end - start)[np.newaxis, :]

    @staticmethod
    def _read_nearest(plane: np.ndarray, points: np.ndarray, f_d: int) -> np.ndarray:
        height, width = plane.shape
        cols = np.clip(np.floor(points[:, 0] / f_d).astype(int), 0, width - 1)
        rows = np.clip(np.floor(points[:, 1] / f_d).astype(int), 0, height - 1)
        return plane[rows, cols]

    @staticmethod
    def _read_bilinear(plane: np.ndarray, points: np.ndarray, f_d: int) -> np.ndarray:
        height, width = plane.shape
        u = np.clip(points[:, 0] / f_d - 0.5, 0.0, width - 1.0)
        v = np.clip(points[:, 1] / f_d - 0.5, 0.0, height - 1.0)
        col0 = np.floor(u).astype(int)
        row0 = np.floor(v).astype(int)
        col1 = np.minimum(col0 + 1, width - 1)
        row1 = np.minimum(row0 + 1, height - 1)
        du, dv = u - col0, v - row0
        top = plane[row0, col0] * (1 - du) + plane[row0, col1] * du
        bottom = plane[row1, col0] * (1 - du) + plane[row1, col1] * du
        return top * (1 - dv) + bottom * dv

    def score_connection(
        self,
        pafs: FieldTensor,
        parent: JointCandidate,
        child: JointCandidate,
        limb_type: int,
        cfg: DecoderConfig,
        *,
        spec: SkeletonSpec | None = None,
    ) -> ConnectionCandidate:
        if spec is not None and spec.limbs[limb_type] != (parent.joint_type, child.joint_type):
            raise InvariantViolation(
                f"limb {limb_type} joins {spec.limbs[limb_type]}, got ({parent.joint_type}, {child.joint_type})"
            )
        start = np.asarray(parent.refined_position, dtype=np.float64)
        end = np.asarray(child.refined_position, dtype=np.float64)
        delta = end - start
        length = float(np.linalg.norm(delta))
        if length <= 0.0:
            return ConnectionCandidate(limb_type, parent, child, 0, (0.0, 0.0), 0.0)

        v_t = delta / length
        points = self._sample_points(start, end, pafs.f_d, cfg.num_samples)
        reader = self._read_bilinear if cfg.bilinear_pafs else self._read_nearest
        field_x = reader(pafs.data[2 * limb_type].astype(np.float64), points, pafs.f_d)
        field_y = reader(pafs.data[2 * limb_type + 1].astype(np.float64), points, pafs.f_d)

        bias = np.abs(field_x * v_t[1] - field_y * v_t[0])
        aligned = (bias <= cfg.bias_threshold) & (np.hypot(field_x, field_y) > 0) & (field_x * v_t[0] + field_y * v_t[1] > 0)
        return ConnectionCandidate(
            limb_type=limb_type,
            parent=parent,
            child=child,
            score=int(np.count_nonzero(aligned)),
            direction=(float(v_t[0]), float(v_t[1])),
            length=length,
        )

    def match_limbs(
        self,
        candidates: Sequence[ConnectionCandidate] | Mapping[int, Sequence[ConnectionCandidate]],
        cfg: DecoderConfig,
    ) -> list[ConnectionCandidate]:
        flat = [item for group in candidates.values() for item in group] if isinstance(candidates, Mapping) else candidates
        minimum = cfg.min_aligned_fraction * cfg.num_samples
        grouped: dict[int, list[ConnectionCandidate]] = defaultdict(list)
        for connection in flat:
            if connection.score >= minimum and connection.score > 0:
                grouped[connection.limb_type].append(connection)

        accepted: list[ConnectionCandidate] = []
        for limb_type in sorted(grouped):
            group = grouped[limb_type]
            parents = sorted({c.parent for c in group}, key=lambda joint: joint.cell)
            children = sorted({c.child for c in group}, key=lambda joint: joint.cell)
            parent_index = {joint: index for index, joint in enumerate(parents)}
            child_index = {joint: index for index, joint in enumerate(children)}
            scores = np.zeros((len(parents), len(children)))
            lengths = np.zeros_like(scores)
            lookup: dict[tuple[int, int], ConnectionCandidate] = {}
            for connection in group:
                key = (parent_index[connection.parent], child_index[connection.child])
                scores[key] = connection.score
                lengths[key] = connection.length
                lookup[key] = connection

            if cfg.matcher == Matcher.EXACT:
                edges, _ = matching_service.exact(scores)
            else:
                edges, _ = matching_service.greedy(scores, lengths)
            accepted.extend(lookup[edge] for edge in sorted(edges))
        return accepted

    def assemble(
        self,
        connections: Sequence[ConnectionCandidate],
        joint_candidates: Sequence[JointCandidate],
        spec: SkeletonSpec,
        cfg: DecoderConfig | None = None,
    ) -> list[DecodedPose]:
        cfg = cfg or DecoderConfig()
        index = {candidate: position for position, candidate in enumerate(joint_candidates)}
        links = DisjointSet(len(joint_candidates))
        for connection in connections:
            if connection.parent not in index or connection.child not in index:
                raise InvariantViolation("accepted connection references an unknown joint candidate")
            links.union(index[connection.parent], index[connection.child])

        component_connections: dict[int, list[ConnectionCandidate]] = defaultdict(list)
        for connection in connections:
            component_connections[links.find(index[connection.parent])].append(connection)

        poses: list[tuple[tuple, DecodedPose]] = []
        for component in links.components():
            members = [joint_candidates[position] for position in component]
            root = links.find(component[0])
            limbs = component_connections.get(root, [])
            if not limbs and members[0].score < 2.0 * cfg.peak_threshold:
                continue

            best: dict[int, JointCandidate] = {}
            for member in sorted(members, key=lambda joint: (-joint.score, joint.cell)):
                best.setdefault(member.joint_type, member)
            joints = tuple(
                (best[joint_type].refined_position[0], best[joint_type].refined_position[1], best[joint_type].score)
                if joint_type in best
                else None
                for joint_type in range(spec.num_joints)
            )
            parts = [member.score for member in members] + [limb.score / cfg.num_samples for limb in limbs]
            score = float(np.mean(parts))
            first_cell = min((member.cell, member.joint_type) for member in members)
            pose = DecodedPose(joints=joints, score=score, members=tuple(sorted(members, key=lambda m: (m.joint_type, m.cell))))
            poses.append(((-score, first_cell), pose))

        poses.sort(key=lambda item: item[0])
        return [pose for _, pose in poses]

    def decode(self, fields: FieldSet, spec: SkeletonSpec, cfg: DecoderConfig) -> list[DecodedPose]:
        if fields.heatmaps.channels < spec.num_joints:
            raise DimensionError(f"heatmaps hold {fields.heatmaps.channels} channels, skeleton needs {spec.num_joints}")
        if fields.pafs.channels != spec.paf_channels:
            raise DimensionError(f"pafs hold {fields.pafs.channels} channels, skeleton needs {spec.paf_channels}")
        if fields.offsets.channels != spec.offset_channels:
            raise DimensionError(f"offsets hold {fields.offsets.channels} channels, skeleton needs {spec.offset_channels}")

        peaks = self.extract_peaks(fields.heatmaps, cfg, num_joints=spec.num_joints)
        if cfg.use_offsets:
            peaks = [self.refine_peak(peak, fields.offsets, fields.f_d) for peak in peaks]

        by_type: dict[int, list[JointCandidate]] = defaultdict(list)
        for peak in peaks:
            by_type[peak.joint_type].append(peak)

        scored: list[ConnectionCandidate] = []
        for limb_type, (parent_type, child_type) in enumerate(spec.limbs):
            for parent in by_type.get(parent_type, ()):
                for child in by_type.get(child_type, ()):
                    scored.append(self.score_connection(fields.pafs, parent, child, limb_type, cfg))

        accepted = self.match_limbs(scored, cfg)
        poses = self.assemble(accepted, peaks, spec, cfg)
        limb_counts: dict[str, int] = defaultdict(int)
        for connection in accepted:
            limb_counts[spec.limb_name(connection.limb_type)] += 1
        observability_metrics_service.increment("decoder.connections", len(accepted))
        observability_metrics_service.increment("decoder.poses", len(poses))
        logger.debug(
            "fields decoded",
            extra={
                "context": {
                    "component": "decoder",
                    "event": "decode",
                    "peaks": len(peaks),
                    "connections": len(accepted),
                    "poses": len(poses),
                    "limbs": dict(limb_counts),
                }
            },
        )
        return poses

    def detections_to_coco(self, detections: Mapping[int, Sequence[DecodedPose]], spec: SkeletonSpec) -> list[dict]:
        results: list[dict] = []
        for image_id in sorted(detections):
            for pose in detections[image_id]:
                keypoints: list[float] = []
                for name in COCO_KEYPOINT_NAMES:
                    joint = pose.joints[spec.joint_index(name)] if name in spec.joint_names else None
                    keypoints.extend([0.0, 0.0, 0.0] if joint is None else [joint[0], joint[1], joint[2]])
                results.append({"image_id": image_id, "category_id": 1, "keypoints": keypoints, "score": pose.score})
        return results

    def write_detections(self, detections: Mapping[int, Sequence[DecodedPose]], spec: SkeletonSpec) -> str:
        return json.dumps(self.detections_to_coco(detections, spec), indent=1)

    def read_detections(self, document: str | bytes | list, spec: SkeletonSpec) -> dict[int, list[DecodedPose]]:
        """Parse COCO results; a keypoint whose confidence is 0 is missing and the neck is rebuilt from the shoulders."""
        if isinstance(document, (str, bytes)):
            try:
                records = json.loads(document)
            except (UnicodeDecodeError, json.JSONDecodeError) as exc:
                raise AnnotationParseError(f"detections are not valid JSON: {exc}") from exc
        else:
            records = document
        if not isinstance(records, list):
            raise AnnotationParseError("detections must be a JSON list of results")

        detections: dict[int, list[DecodedPose]] = defaultdict(list)
        for position, record in enumerate(records):
            where = f"detections[{position}]"
            if not isinstance(record, dict):
                raise AnnotationParseError(f"{where}: record must be an object")
            image_id, keypoints, score = record.get("image_id"), record.get("keypoints"), record.get("score")
            if isinstance(image_id, bool) or not isinstance(image_id, int):
                raise AnnotationParseError(f"{where}: 'image_id' must be an integer")
            if not isinstance(keypoints, list) or len(keypoints) != 3 * len(COCO_KEYPOINT_NAMES):
                raise AnnotationParseError(f"{where}: 'keypoints' must hold {3 * len(COCO_KEYPOINT_NAMES)} numbers")
            if isinstance(score, bool) or not isinstance(score, (int, float)):
                raise AnnotationParseError(f"{where}: 'score' must be a number")

            joints: list[tuple[float, float, float] | None] = [None] * spec.num_joints
            coco: dict[str, tuple[float, float, float]] = {}
            for slot, name in enumerate(COCO_KEYPOINT_NAMES):
                x, y, confidence = (float(value) for value in keypoints[3 * slot : 3 * slot + 3])
                if confidence <= 0:
                    continue
                coco[name] = (x, y, confidence)
                if name in spec.joint_names:
                    joints[spec.joint_index(name)] = (x, y, confidence)
            if "neck" in spec.joint_names and "left_shoulder" in coco and "right_shoulder" in coco:
                left, right = coco["left_shoulder"], coco["right_shoulder"]
                joints[spec.joint_index("neck")] = ((left[0] + right[0]) / 2.0, (left[1] + right[1]) / 2.0, min(left[2], right[2]))
            if any(joint is not None for joint in joints):
                detections[image_id].append(DecodedPose(joints=tuple(joints), score=float(score)))
        return dict(detections)


decoder_service = DecoderService()
