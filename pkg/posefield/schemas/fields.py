from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from posefield.core.errors import FieldValidationError


def output_grid(image_size: tuple[int, int], f_d: int) -> tuple[int, int]:
    """Return (height, width) of the output grid for an input (W, H)."""
    width, height = image_size
    return math.ceil(height / f_d), math.ceil(width / f_d)


@dataclass(frozen=True, eq=False)
class FieldTensor:
    """Row-major float32 tensor at output resolution, indexed (c, i, j)."""

    data: np.ndarray
    f_d: int
    image_size: tuple[int, int]

    def __post_init__(self) -> None:
        array = np.array(self.data, dtype=np.float32, order="C", copy=True)
        if array.ndim == 0:
            raise FieldValidationError("field tensor needs at least one dimension")
        if not np.all(np.isfinite(array)):
            raise FieldValidationError("field tensor contains non-finite values")
        if self.f_d <= 0:
            raise FieldValidationError(f"downsample factor must be positive, got {self.f_d}")
        width, height = self.image_size
        if width <= 0 or height <= 0:
            raise FieldValidationError(f"image size must be positive, got {width}x{height}")
        if array.ndim == 3 and array.shape[1:] != output_grid(self.image_size, self.f_d):
            raise FieldValidationError(
                f"grid {array.shape[1:]} does not match ceil(({height}, {width}) / {self.f_d})"
            )
        array.flags.writeable = False
        object.__setattr__(self, "data", array)
        object.__setattr__(self, "image_size", (int(width), int(height)))

    @property
    def dims(self) -> tuple[int, ...]:
        return tuple(int(size) for size in self.data.shape)

    @property
    def channels(self) -> int:
        return self.dims[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.dims[1], self.dims[2]

    def same_as(self, other: "FieldTensor") -> bool:
        """Bit-exact equality of dims, grid metadata and payload."""
        return (
            self.dims == other.dims
            and self.f_d == other.f_d
            and self.image_size == other.image_size
            and self.data.tobytes() == other.data.tobytes()
        )

    def with_data(self, data: np.ndarray) -> "FieldTensor":
        return FieldTensor(data=data, f_d=self.f_d, image_size=self.image_size)


@dataclass(frozen=True, eq=False)
class FieldSet:
    """Heatmaps F_s, interleaved (m, n) PAF pairs and interleaved (x, y) offsets."""

    heatmaps: FieldTensor
    pafs: FieldTensor
    offsets: FieldTensor

    def __post_init__(self) -> None:
        members = (self.heatmaps, self.pafs, self.offsets)
        for tensor in members:
            if len(tensor.dims) != 3:
                raise FieldValidationError("field set members must be (channels, height, width) tensors")
        reference = self.heatmaps
        for tensor in members[1:]:
            if tensor.grid != reference.grid or tensor.f_d != reference.f_d or tensor.image_size != reference.image_size:
                raise FieldValidationError("field set members must share grid size, f_d and image size")
        if self.pafs.channels % 2 or self.offsets.channels % 2:
            raise FieldValidationError("PAF and offset tensors need an even channel count")

    @property
    def f_d(self) -> int:
        return self.heatmaps.f_d

    @property
    def image_size(self) -> tuple[int, int]:
        return self.heatmaps.image_size

    @property
    def grid(self) -> tuple[int, int]:
        return self.heatmaps.grid

    def same_as(self, other: "FieldSet") -> bool:
        return all(
            mine.same_as(theirs)
            for mine, theirs in zip((self.heatmaps, self.pafs, self.offsets), (other.heatmaps, other.pafs, other.offsets))
        )
