from __future__ import annotations

import json
import logging
from typing import Any

from pydantic import ValidationError

from posefield.core.errors import AnnotationParseError, AnnotationReferenceError
from posefield.schemas.skeleton import JointRecord, PoseInstance, Scene, SkeletonSpec, Visibility

logger = logging.getLogger(__name__)

COCO_KEYPOINT_NAMES = (
    "nose",
    "left_eye",
    "right_eye",
    "left_ear",
    "right_ear",
    "left_shoulder",
    "right_shoulder",
    "left_elbow",
    "right_elbow",
    "left_wrist",
    "right_wrist",
    "left_hip",
    "right_hip",
    "left_knee",
    "right_knee",
    "left_ankle",
    "right_ankle",
)

# COCO per-keypoint sigmas; kappa = 2 * sigma keeps exp(-d^2 / (2 s^2 kappa^2)) equal to cocoeval.
COCO_SIGMAS = {
    "nose": 0.026,
    "left_eye": 0.025,
    "right_eye": 0.025,
    "left_ear": 0.035,
    "right_ear": 0.035,
    "left_shoulder": 0.079,
    "right_shoulder": 0.079,
    "left_elbow": 0.072,
    "right_elbow": 0.072,
    "left_wrist": 0.062,
    "right_wrist": 0.062,
    "left_hip": 0.107,
    "right_hip": 0.107,
    "left_knee": 0.087,
    "right_knee": 0.087,
    "left_ankle": 0.089,
    "right_ankle": 0.089,
    "neck": 0.079,
}

BODY18_JOINTS = (
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
)

BODY18_TREE_LIMBS = (
    ("neck", "right_shoulder"),
    ("right_shoulder", "right_elbow"),
    ("right_elbow", "right_wrist"),
    ("neck", "left_shoulder"),
    ("left_shoulder", "left_elbow"),
    ("left_elbow", "left_wrist"),
    ("neck", "right_hip"),
    ("right_hip", "right_knee"),
    ("right_knee", "right_ankle"),
    ("neck", "left_hip"),
    ("left_hip", "left_knee"),
    ("left_knee", "left_ankle"),
    ("neck", "nose"),
    ("nose", "right_eye"),
    ("right_eye", "right_ear"),
    ("nose", "left_eye"),
    ("left_eye", "left_ear"),
)

BODY18_EAR_SHOULDER_LIMBS = (
    ("right_shoulder", "right_ear"),
    ("left_shoulder", "left_ear"),
)

VISIBILITY_FROM_COCO = {0: Visibility.ABSENT, 1: Visibility.OCCLUDED, 2: Visibility.VISIBLE}
VISIBILITY_TO_COCO = {Visibility.ABSENT: 0, Visibility.OCCLUDED: 1, Visibility.VISIBLE: 2}


class SkeletonService:
    def default_coco_skeleton(self, *, include_ear_shoulder: bool = False) -> SkeletonSpec:
        limbs = BODY18_TREE_LIMBS + (BODY18_EAR_SHOULDER_LIMBS if include_ear_shoulder else ())
        index = {name: position for position, name in enumerate(BODY18_JOINTS)}
        mirror_pairs = tuple(
            (index[name], index["right_" + name[len("left_"):]]) for name in BODY18_JOINTS if name.startswith("left_")
        )
        return SkeletonSpec(
            joint_names=BODY18_JOINTS,
            background_channel=True,
            limbs=tuple((index[parent], index[child]) for parent, child in limbs),
            mirror_pairs=mirror_pairs,
            oks_kappa=tuple(2.0 * COCO_SIGMAS[name] for name in BODY18_JOINTS),
        )

    @staticmethod
    def _load_document(annotation_document: str | bytes | dict) -> dict:
        if isinstance(annotation_document, dict):
            return annotation_document
        try:
            text = annotation_document.decode("utf-8") if isinstance(annotation_document, bytes) else annotation_document
            document = json.loads(text)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise AnnotationParseError(f"annotation document is not valid UTF-8 JSON: {exc}") from exc
        if not isinstance(document, dict):
            raise AnnotationParseError("annotation document must be a JSON object")
        return document

    @staticmethod
    def _int_field(record: dict, key: str, where: str) -> int:
        value = record.get(key)
        if isinstance(value, bool) or not isinstance(value, int):
            raise AnnotationParseError(f"{where}: field '{key}' must be an integer, got {value!r}")
        return value

    def _parse_images(self, images: Any) -> dict[int, tuple[int, int]]:
        if not isinstance(images, list):
            raise AnnotationParseError("annotation document needs an 'images' list")
        sizes: dict[int, tuple[int, int]] = {}
        for position, image in enumerate(images):
            where = f"images[{position}]"
            if not isinstance(image, dict):
                raise AnnotationParseError(f"{where}: record must be an object")
            image_id = self._int_field(image, "id", where)
            width = self._int_field(image, "width", where)
            height = self._int_field(image, "height", where)
            if width <= 0 or height <= 0:
                raise AnnotationParseError(f"{where} (id={image_id}): image size must be positive")
            if image_id in sizes:
                raise AnnotationReferenceError(f"{where}: duplicate image id {image_id}")
            sizes[image_id] = (width, height)
        return sizes

    def _parse_pose(self, keypoints: Any, spec: SkeletonSpec, where: str) -> PoseInstance:
        if not isinstance(keypoints, list) or len(keypoints) != 3 * len(COCO_KEYPOINT_NAMES):
            raise AnnotationParseError(f"{where}: 'keypoints' must hold {3 * len(COCO_KEYPOINT_NAMES)} numbers")
        joints: list[JointRecord | None] = [None] * spec.num_joints
        coco: dict[str, JointRecord | None] = {}
        for slot, name in enumerate(COCO_KEYPOINT_NAMES):
            x, y, v = keypoints[3 * slot : 3 * slot + 3]
            if not all(isinstance(value, (int, float)) and not isinstance(value, bool) for value in (x, y, v)):
                raise AnnotationParseError(f"{where}: keypoint '{name}' must be numeric")
            if int(v) not in VISIBILITY_FROM_COCO:
                raise AnnotationParseError(f"{where}: keypoint '{name}' has visibility {v}, expected 0, 1 or 2")
            visibility = VISIBILITY_FROM_COCO[int(v)]
            record = None if visibility == Visibility.ABSENT else JointRecord(x=float(x), y=float(y), visibility=visibility)
            coco[name] = record
            if name in spec.joint_names:
                joints[spec.joint_index(name)] = record

        if "neck" in spec.joint_names:
            left, right = coco.get("left_shoulder"), coco.get("right_shoulder")
            if left is not None and right is not None:
                both_visible = left.visibility == Visibility.VISIBLE and right.visibility == Visibility.VISIBLE
                joints[spec.joint_index("neck")] = JointRecord(
                    x=(left.x + right.x) / 2.0,
                    y=(left.y + right.y) / 2.0,
                    visibility=Visibility.VISIBLE if both_visible else Visibility.OCCLUDED,
                )
        return PoseInstance(joints=tuple(joints))

    def ingest_coco(self, annotation_document: str | bytes | dict, spec: SkeletonSpec) -> list[Scene]:
        document = self._load_document(annotation_document)
        sizes = self._parse_images(document.get("images"))
        annotations = document.get("annotations", [])
        if not isinstance(annotations, list):
            raise AnnotationParseError("annotation document field 'annotations' must be a list")

        persons: dict[int, list[PoseInstance]] = {image_id: [] for image_id in sizes}
        areas: dict[int, list[float | None]] = {image_id: [] for image_id in sizes}
        skipped_crowd = 0
        for position, annotation in enumerate(annotations):
            where = f"annotations[{position}]"
            if not isinstance(annotation, dict):
                raise AnnotationParseError(f"{where}: record must be an object")
            where = f"{where} (id={annotation.get('id')})"
            image_id = self._int_field(annotation, "image_id", where)
            if image_id not in sizes:
                raise AnnotationReferenceError(f"{where}: unknown image_id {image_id}")
            if annotation.get("iscrowd"):
                skipped_crowd += 1
                continue
            area = annotation.get("area")
            if area is not None and (isinstance(area, bool) or not isinstance(area, (int, float)) or area <= 0):
                raise AnnotationParseError(f"{where}: 'area' must be a positive number, got {area!r}")
            persons[image_id].append(self._parse_pose(annotation.get("keypoints"), spec, where))
            areas[image_id].append(float(area) if area is not None else None)

        if skipped_crowd:
            logger.warning(
                "crowd annotations skipped",
                extra={"context": {"component": "skeleton", "event": "skip_crowd", "count": skipped_crowd}},
            )

        scenes: list[Scene] = []
        for image_id, image_size in sizes.items():
            try:
                scenes.append(
                    Scene(
                        image_id=image_id,
                        image_size=image_size,
                        persons=tuple(persons[image_id]),
                        person_areas=tuple(areas[image_id]),
                    )
                )
            except ValidationError as exc:
                raise AnnotationParseError(f"image id {image_id}: {exc.errors()[0]['msg']}") from exc
        return scenes

    def serialize_coco(self, scenes: list[Scene], spec: SkeletonSpec) -> str:
        images: list[dict] = []
        annotations: list[dict] = []
        for scene in scenes:
            width, height = scene.image_size
            images.append({"id": scene.image_id, "width": width, "height": height})
            for person_index, person in enumerate(scene.persons):
                keypoints: list[float | int] = []
                labeled = 0
                for name in COCO_KEYPOINT_NAMES:
                    joint = person.joints[spec.joint_index(name)] if name in spec.joint_names else None
                    if joint is None:
                        keypoints.extend([0, 0, 0])
                        continue
                    keypoints.extend([joint.x, joint.y, VISIBILITY_TO_COCO[joint.visibility]])
                    labeled += 1
                annotation = {
                    "id": len(annotations) + 1,
                    "image_id": scene.image_id,
                    "category_id": 1,
                    "iscrowd": 0,
                    "num_keypoints": labeled,
                    "keypoints": keypoints,
                }
                area = scene.area_of(person_index)
                if area is not None:
                    annotation["area"] = area
                annotations.append(annotation)

        name_index = {name: position for position, name in enumerate(COCO_KEYPOINT_NAMES)}
        coco_skeleton = [
            [name_index[spec.joint_names[parent]] + 1, name_index[spec.joint_names[child]] + 1]
            for parent, child in spec.limbs
            if spec.joint_names[parent] in name_index and spec.joint_names[child] in name_index
        ]
        document = {
            "images": images,
            "annotations": annotations,
            "categories": [
                {"id": 1, "name": "person", "keypoints": list(COCO_KEYPOINT_NAMES), "skeleton": coco_skeleton}
            ],
        }
        return json.dumps(document, ensure_ascii=False, indent=1)


skeleton_service = SkeletonService()
