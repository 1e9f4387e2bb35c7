from __future__ import annotations

from functools import lru_cache

import numpy as np

from posefield.core.errors import ConfigError
from posefield.schemas.synth import UpsampleKernel

KEYS_A = -0.5


def keys_kernel(distance: np.ndarray, a: float = KEYS_A) -> np.ndarray:
    """Keys cubic convolution weights for |distance| in [0, 2)."""
    x = np.abs(distance)
    near = (a + 2.0) * x**3 - (a + 3.0) * x**2 + 1.0
    far = a * x**3 - 5.0 * a * x**2 + 8.0 * a * x - 4.0 * a
    return np.where(x <= 1.0, near, np.where(x < 2.0, far, 0.0))


@lru_cache(maxsize=64)
def interpolation_matrix(source: int, factor: int, kernel: UpsampleKernel) -> np.ndarray:
    """(source * factor, source) matrix mapping samples to an upsampled axis.

    Half-pixel geometry (align_corners=False); taps past either end replicate the edge sample.
    """
    target = source * factor
    coords = (np.arange(target, dtype=np.float64) + 0.5) / factor - 0.5
    matrix = np.zeros((target, source), dtype=np.float64)
    rows = np.arange(target)

    if kernel == UpsampleKernel.NEAREST:
        nearest = np.clip(np.floor(coords + 0.5).astype(int), 0, source - 1)
        matrix[rows, nearest] = 1.0
    elif kernel == UpsampleKernel.BILINEAR:
        base = np.floor(coords).astype(int)
        frac = coords - base
        np.add.at(matrix, (rows, np.clip(base, 0, source - 1)), 1.0 - frac)
        np.add.at(matrix, (rows, np.clip(base + 1, 0, source - 1)), frac)
    elif kernel == UpsampleKernel.BICUBIC:
        base = np.floor(coords).astype(int)
        for tap in (-1, 0, 1, 2):
            weights = keys_kernel(coords - (base + tap))
            np.add.at(matrix, (rows, np.clip(base + tap, 0, source - 1)), weights)
    else:
        raise ConfigError(f"kernel '{kernel}' has no interpolation matrix")
    matrix.flags.writeable = False
    return matrix


class UpsampleService:
    def upsample(self, plane: np.ndarray, factor: int, kernel: UpsampleKernel | str) -> np.ndarray:
        kernel = UpsampleKernel(kernel)
        if factor < 1:
            raise ConfigError(f"upsampling factor must be at least 1, got {factor}")
        height, width = plane.shape
        rows = interpolation_matrix(height, factor, kernel)
        cols = interpolation_matrix(width, factor, kernel)
        return rows @ np.asarray(plane, dtype=np.float64) @ cols.T

    def locate_peak(self, plane: np.ndarray, *, subpixel: bool = False) -> tuple[float, float]:
        """Pixel-center (x, y) of the first maximum, optionally refined by a 1-D quadratic fit per axis."""
        row, col = np.unravel_index(int(np.argmax(plane)), plane.shape)
        x, y = col + 0.5, row + 0.5
        if not subpixel:
            return float(x), float(y)
        height, width = plane.shape
        if 0 < col < width - 1:
            x += _parabola_vertex(plane[row, col - 1], plane[row, col], plane[row, col + 1])
        if 0 < row < height - 1:
            y += _parabola_vertex(plane[row - 1, col], plane[row, col], plane[row + 1, col])
        return float(x), float(y)


def _parabola_vertex(left: float, center: float, right: float) -> float:
    curvature = left - 2.0 * center + right
    if curvature >= 0:
        return 0.0
    return float(np.clip(0.5 * (left - right) / curvature, -0.5, 0.5))


upsample_service = UpsampleService()
