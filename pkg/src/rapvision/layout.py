"""Composition of retained crops into a smaller canvas.

``spatial_layout`` drops every all-zero row and column of the retention mask
and places each surviving crop at its compressed (row, col), so any two crops
keep their relative up/down and left/right order.  The two ``strip`` orders are
the position-agnostic baselines used by the ablation harness.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import InvalidInput
from .grid import CropGrid, SourceImage
from .retrieval import RetentionMask, ScoreMatrix


@dataclass(frozen=True, eq=False)
class CompressedMask:
    kept_rows: tuple[int, ...]
    kept_cols: tuple[int, ...]
    bits: np.ndarray

    @property
    def n_rows(self) -> int:
        return len(self.kept_rows)

    @property
    def n_cols(self) -> int:
        return len(self.kept_cols)

    def phi(self, ci: int, cj: int) -> tuple[int, int]:
        """Original (row, col) of compressed position (ci, cj)."""
        return self.kept_rows[ci], self.kept_cols[cj]


def compress_mask(mask: RetentionMask) -> CompressedMask:
    M = mask.bits
    if not M.any():
        raise InvalidInput("retention mask has no set bit")
    kept_rows = tuple(np.flatnonzero(M.any(axis=1)).tolist())
    kept_cols = tuple(np.flatnonzero(M.any(axis=0)).tolist())
    # every (ci, cj), from 0, maps to M[kept_rows[ci], kept_cols[cj]]
    bits = M[np.ix_(kept_rows, kept_cols)].copy()
    bits.flags.writeable = False
    return CompressedMask(kept_rows, kept_cols, bits)


@dataclass(frozen=True, eq=False)
class Canvas:
    """A composed image plus where each of its cells came from.

    ``mapping`` holds one entry per *filled* canvas cell, canvas (row, col) to
    source grid (row, col).  Unfilled cells are solid black.
    """

    image: SourceImage
    cell_size: int
    mapping: dict[tuple[int, int], tuple[int, int]]
    filled: np.ndarray
    source_shape: tuple[int, int]
    compressed: CompressedMask | None = field(default=None, repr=False)

    @property
    def n_rows(self) -> int:
        return self.filled.shape[0]

    @property
    def n_cols(self) -> int:
        return self.filled.shape[1]

    @property
    def n_cells(self) -> int:
        return self.filled.size

    @property
    def area(self) -> int:
        return self.image.width * self.image.height

    def placements(self) -> dict[tuple[int, int], tuple[int, int]]:
        """Source cell to canvas cell (inverse of ``mapping``)."""
        return {src: dst for dst, src in self.mapping.items()}

    def to_png(self) -> bytes:
        return self.image.to_png()


def _compose(grid: CropGrid, n_rows: int, n_cols: int, mapping) -> Canvas:
    cs = grid.cell_size
    out = np.zeros((n_rows * cs, n_cols * cs, 3), dtype=np.uint8)
    filled = np.zeros((n_rows, n_cols), dtype=bool)
    for (ci, cj), (i, j) in mapping.items():
        px = grid.view(i, j)
        h, w = px.shape[:2]
        # ragged edge crops sit top-left, the rest of the cell stays black
        out[ci * cs:ci * cs + h, cj * cs:cj * cs + w] = px
        filled[ci, cj] = True
    filled.flags.writeable = False
    return Canvas(SourceImage(out), cs, dict(mapping), filled, (grid.rows, grid.cols))


def _check_dims(grid: CropGrid, mask: RetentionMask) -> None:
    if (mask.rows, mask.cols) != (grid.rows, grid.cols):
        raise InvalidInput(
            f"mask is {mask.rows}x{mask.cols} but grid is {grid.rows}x{grid.cols}"
        )


def spatial_layout(grid: CropGrid, mask: RetentionMask) -> Canvas:
    _check_dims(grid, mask)
    cm = compress_mask(mask)
    mapping = {}
    for ci in range(cm.n_rows):
        for cj in range(cm.n_cols):
            if cm.bits[ci, cj]:
                mapping[(ci, cj)] = cm.phi(ci, cj)
    canvas = _compose(grid, cm.n_rows, cm.n_cols, mapping)
    object.__setattr__(canvas, "compressed", cm)
    return canvas


class StripOrder(str, Enum):
    SCORE_ASCENDING = "score-ascending"
    APPEARANCE = "appearance"


def strip_layout_by_score(
    grid: CropGrid,
    mask: RetentionMask,
    scores: ScoreMatrix | None,
    order: StripOrder | str = StripOrder.SCORE_ASCENDING,
) -> Canvas:
    """Pack retained crops left-to-right into ``ceil(sqrt(k))`` columns."""
    _check_dims(grid, mask)
    order = StripOrder(order)
    cells = mask.flat_indices()
    if not cells:
        raise InvalidInput("retention mask has no set bit")
    if order is StripOrder.SCORE_ASCENDING:
        if scores is None:
            raise InvalidInput("score-ascending order needs a score matrix")
        if (scores.rows, scores.cols) != (grid.rows, grid.cols):
            raise InvalidInput("score matrix does not match the grid")
        flat = scores.scores.ravel()
        cells = sorted(cells, key=lambda idx: (flat[idx], idx))
    k = len(cells)
    n_cols = math.ceil(math.sqrt(k))
    n_rows = math.ceil(k / n_cols)
    mapping = {divmod(pos, n_cols): grid.unflat(idx) for pos, idx in enumerate(cells)}
    return _compose(grid, n_rows, n_cols, mapping)
