from __future__ import annotations

from enum import StrEnum

from pydantic import BaseModel, ConfigDict, field_validator, model_validator


class Visibility(StrEnum):
    ABSENT = "absent"
    OCCLUDED = "occluded"
    VISIBLE = "visible"


class SkeletonSpec(BaseModel):
    model_config = ConfigDict(frozen=True)

    joint_names: tuple[str, ...]
    background_channel: bool = True
    limbs: tuple[tuple[int, int], ...]
    mirror_pairs: tuple[tuple[int, int], ...]
    oks_kappa: tuple[float, ...]

    @model_validator(mode="after")
    def _check_taxonomy(self) -> "SkeletonSpec":
        count = len(self.joint_names)
        if count == 0:
            raise ValueError("skeleton needs at least one joint")
        if len(set(self.joint_names)) != count:
            raise ValueError("joint names must be unique")
        for parent, child in self.limbs:
            if not (0 <= parent < count and 0 <= child < count):
                raise ValueError(f"limb ({parent}, {child}) references an unknown joint")
            if parent == child:
                raise ValueError(f"limb ({parent}, {child}) connects a joint to itself")
        seen: set[int] = set()
        for left, right in self.mirror_pairs:
            for index in (left, right):
                if not 0 <= index < count:
                    raise ValueError(f"mirror pair ({left}, {right}) references an unknown joint")
                if index in seen:
                    raise ValueError(f"joint {index} appears in more than one mirror pair")
                seen.add(index)
            if left == right:
                raise ValueError(f"mirror pair ({left}, {right}) maps a joint to itself")
        if len(self.oks_kappa) != count:
            raise ValueError("oks_kappa needs one constant per joint")
        if any(kappa <= 0 for kappa in self.oks_kappa):
            raise ValueError("oks_kappa constants must be positive")
        return self

    @property
    def num_joints(self) -> int:
        return len(self.joint_names)

    @property
    def num_limbs(self) -> int:
        return len(self.limbs)

    @property
    def heatmap_channels(self) -> int:
        return self.num_joints + (1 if self.background_channel else 0)

    @property
    def offset_channels(self) -> int:
        return 2 * self.num_joints

    @property
    def paf_channels(self) -> int:
        return 2 * self.num_limbs

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(f"unknown joint '{name}'") from None

    def mirror(self, index: int) -> int | None:
        for left, right in self.mirror_pairs:
            if index == left:
                return right
            if index == right:
                return left
        return None

    def mirror_limb(self, limb_index: int) -> int | None:
        parent, child = self.limbs[limb_index]
        mapped_parent = self.mirror(parent)
        mapped_child = self.mirror(child)
        if mapped_parent is None:
            mapped_parent = parent
        if mapped_child is None:
            mapped_child = child
        if (mapped_parent, mapped_child) == (parent, child):
            return None
        for index, limb in enumerate(self.limbs):
            if limb == (mapped_parent, mapped_child):
                return index
        return None

    def limb_name(self, limb_index: int) -> str:
        parent, child = self.limbs[limb_index]
        return f"{self.joint_names[parent]}-{self.joint_names[child]}"


class JointRecord(BaseModel):
    model_config = ConfigDict(frozen=True)

    x: float
    y: float
    visibility: Visibility = Visibility.VISIBLE


class PoseInstance(BaseModel):
    model_config = ConfigDict(frozen=True)

    joints: tuple[JointRecord | None, ...]

    @field_validator("joints", mode="after")
    @classmethod
    def _drop_absent(cls, joints: tuple[JointRecord | None, ...]) -> tuple[JointRecord | None, ...]:
        return tuple(None if joint is None or joint.visibility == Visibility.ABSENT else joint for joint in joints)

    @property
    def labeled_count(self) -> int:
        return sum(1 for joint in self.joints if joint is not None)

    def bbox_area(self) -> float:
        points = [(joint.x, joint.y) for joint in self.joints if joint is not None]
        if not points:
            return 0.0
        xs = [x for x, _ in points]
        ys = [y for _, y in points]
        return (max(xs) - min(xs)) * (max(ys) - min(ys))


class Scene(BaseModel):
    model_config = ConfigDict(frozen=True)

    image_id: int = 0
    image_size: tuple[int, int]
    persons: tuple[PoseInstance, ...] = ()
    person_areas: tuple[float | None, ...] = ()

    @model_validator(mode="after")
    def _check_scene(self) -> "Scene":
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise ValueError(f"image size must be positive, got {width}x{height}")
        if self.person_areas and len(self.person_areas) != len(self.persons):
            raise ValueError("person_areas must align with persons")
        for area in self.person_areas:
            if area is not None and area <= 0:
                raise ValueError("person areas must be strictly positive")
        for person_index, person in enumerate(self.persons):
            for joint in person.joints:
                if joint is None:
                    continue
                if not (0.0 <= joint.x < width and 0.0 <= joint.y < height):
                    raise ValueError(
                        f"person {person_index} joint ({joint.x}, {joint.y}) lies outside the {width}x{height} image"
                    )
        return self

    def area_of(self, person_index: int) -> float | None:
        if not self.person_areas:
            return None
        return self.person_areas[person_index]
