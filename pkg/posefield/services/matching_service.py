from __future__ import annotations

import logging
from collections.abc import Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

logger = logging.getLogger(__name__)

# Bitmask DP is exhaustive up to this many nodes on each side.
EXHAUSTIVE_MAX_SIDE = 8
WEIGHT_TOLERANCE = 1e-9

Edge = tuple[int, int]


def _as_weights(scores: Sequence[Sequence[float]] | np.ndarray) -> np.ndarray:
    weights = np.asarray(scores, dtype=np.float64)
    if weights.ndim != 2:
        raise ValueError(f"score matrix must be 2-D, got shape {weights.shape}")
    return weights


def matching_weight(weights: np.ndarray, edges: Sequence[Edge]) -> float:
    return float(sum(weights[row, col] for row, col in edges))


class MatchingService:
    """Maximum-weight bipartite matching over a rows x cols score matrix.

    Entries <= 0 are treated as missing edges, so the empty matching is always allowed.
    """

    def greedy(
        self,
        scores: Sequence[Sequence[float]] | np.ndarray,
        lengths: Sequence[Sequence[float]] | np.ndarray | None = None,
    ) -> tuple[list[Edge], float]:
        weights = _as_weights(scores)
        tie_lengths = np.zeros_like(weights) if lengths is None else np.asarray(lengths, dtype=np.float64)
        edges = [
            (-weights[row, col], tie_lengths[row, col], row, col)
            for row in range(weights.shape[0])
            for col in range(weights.shape[1])
            if weights[row, col] > 0
        ]
        edges.sort()

        used_rows: set[int] = set()
        used_cols: set[int] = set()
        accepted: list[Edge] = []
        for _, _, row, col in edges:
            if row in used_rows or col in used_cols:
                continue
            used_rows.add(row)
            used_cols.add(col)
            accepted.append((row, col))
        accepted.sort()
        return accepted, matching_weight(weights, accepted)

    def exact(self, scores: Sequence[Sequence[float]] | np.ndarray) -> tuple[list[Edge], float]:
        weights = _as_weights(scores)
        rows, cols = weights.shape
        if rows == 0 or cols == 0:
            return [], 0.0
        if max(rows, cols) <= EXHAUSTIVE_MAX_SIDE:
            return self._exact_bitmask(weights)
        logger.warning(
            "exact matcher falling back to assignment solver",
            extra={"context": {"component": "matching", "event": "fallback", "rows": rows, "cols": cols}},
        )
        return self._exact_assignment(weights)

    @staticmethod
    def _exact_bitmask(weights: np.ndarray) -> tuple[list[Edge], float]:
        # Transpose so the bitmask runs over the shorter side.
        transposed = weights.shape[1] > weights.shape[0]
        table = weights.T if transposed else weights
        rows, cols = table.shape
        masks = 1 << cols

        # best[r][mask]: best weight using rows r.. with columns in mask already taken
        best = np.zeros((rows + 1, masks), dtype=np.float64)
        for row in range(rows - 1, -1, -1):
            for mask in range(masks):
                value = best[row + 1, mask]
                for col in range(cols):
                    bit = 1 << col
                    if mask & bit or table[row, col] <= 0:
                        continue
                    candidate = table[row, col] + best[row + 1, mask | bit]
                    if candidate > value:
                        value = candidate
                best[row, mask] = value

        edges: list[Edge] = []
        mask = 0
        for row in range(rows):
            target = best[row, mask]
            for col in range(cols):
                bit = 1 << col
                if mask & bit or table[row, col] <= 0:
                    continue
                if abs(table[row, col] + best[row + 1, mask | bit] - target) <= WEIGHT_TOLERANCE:
                    edges.append((col, row) if transposed else (row, col))
                    mask |= bit
                    break
        edges.sort()
        return edges, matching_weight(weights, edges)

    @staticmethod
    def _exact_assignment(weights: np.ndarray) -> tuple[list[Edge], float]:
        clipped = np.where(weights > 0, weights, 0.0)
        row_index, col_index = linear_sum_assignment(clipped, maximize=True)
        edges = sorted(
            (int(row), int(col)) for row, col in zip(row_index, col_index) if weights[row, col] > 0
        )
        return edges, matching_weight(weights, edges)


matching_service = MatchingService()
