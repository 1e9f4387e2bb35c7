from __future__ import annotations

import pytest

from posefield.schemas.encoder import EncoderConfig
from posefield.schemas.skeleton import JointRecord, PoseInstance, Scene, SkeletonSpec
from posefield.services.skeleton_service import skeleton_service


@pytest.fixture(scope="session")
def spec() -> SkeletonSpec:
    return skeleton_service.default_coco_skeleton()


@pytest.fixture
def enc_cfg() -> EncoderConfig:
    return EncoderConfig()


def make_person(spec: SkeletonSpec, points: dict[str, tuple[float, float]]) -> PoseInstance:
    return PoseInstance(
        joints=tuple(
            JointRecord(x=points[name][0], y=points[name][1]) if name in points else None for name in spec.joint_names
        )
    )


def make_scene(spec: SkeletonSpec, persons: list[dict[str, tuple[float, float]]], size=(128, 128), image_id=1) -> Scene:
    return Scene(image_id=image_id, image_size=size, persons=tuple(make_person(spec, points) for points in persons))


def coco_keypoints(points: dict[str, tuple[float, float, int]]) -> list[float]:
    from posefield.services.skeleton_service import COCO_KEYPOINT_NAMES

    flat: list[float] = []
    for name in COCO_KEYPOINT_NAMES:
        flat.extend(points.get(name, (0, 0, 0)))
    return flat
