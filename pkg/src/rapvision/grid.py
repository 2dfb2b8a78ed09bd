"""Partitioning of a large image into a lattice of crops.

Grid indexing is row-major, 0-based, with the origin at the top-left corner.
Edge crops keep their real (possibly smaller) size; padding to a uniform cell
only happens when a canvas is composed.
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import InvalidConfig, InvalidInput

DEFAULT_CELL_SIZE = 448
MIN_CELL_SIZE = 16

_RAW_HEADER = struct.Struct("<II")


class Rect(NamedTuple):
    x: int
    y: int
    w: int
    h: int


@dataclass(frozen=True, eq=False)
class SourceImage:
    """An 8-bit RGB image held as a read-only ``(height, width, 3)`` array."""

    pixels: np.ndarray

    def __post_init__(self):
        px = self.pixels
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInput(f"expected an (H, W, 3) RGB array, got shape {px.shape}")
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInput(f"degenerate image {px.shape[1]}x{px.shape[0]}")
        if px.dtype != np.uint8:
            raise InvalidInput(f"expected uint8 pixels, got {px.dtype}")
        if px.flags.writeable:
            px = px.copy()
            px.flags.writeable = False
            object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @cached_property
    def digest(self) -> str:
        h = hashlib.sha256()
        h.update(_RAW_HEADER.pack(self.width, self.height))
        h.update(np.ascontiguousarray(self.pixels).tobytes())
        return h.hexdigest()

    @classmethod
    def from_bytes(cls, width: int, height: int, data: bytes) -> "SourceImage":
        if width < 1 or height < 1:
            raise InvalidInput(f"degenerate image {width}x{height}")
        if len(data) != width * height * 3:
            raise InvalidInput(
                f"pixel buffer has {len(data)} bytes, expected {width * height * 3}"
            )
        arr = np.frombuffer(data, dtype=np.uint8).reshape(height, width, 3)
        return cls(arr)

    @classmethod
    def blank(cls, width: int, height: int) -> "SourceImage":
        return cls(np.zeros((height, width, 3), dtype=np.uint8))

    def to_pil(self) -> Image.Image:
        return Image.fromarray(np.ascontiguousarray(self.pixels), mode="RGB")

    def to_png(self) -> bytes:
        buf = io.BytesIO()
        self.to_pil().save(buf, format="PNG")
        return buf.getvalue()

    def to_raw(self) -> bytes:
        return _RAW_HEADER.pack(self.width, self.height) + np.ascontiguousarray(self.pixels).tobytes()


def decode_raw(data: bytes) -> SourceImage:
    """Parse the fixture format: two little-endian uint32 (width, height) then RGB bytes."""
    if len(data) < _RAW_HEADER.size:
        raise InvalidInput("raw image shorter than its header")
    width, height = _RAW_HEADER.unpack_from(data)
    return SourceImage.from_bytes(width, height, data[_RAW_HEADER.size:])


def decode_image(data: bytes) -> SourceImage:
    """Decode PNG/JPEG bytes (anything Pillow reads) or the raw fixture format."""
    try:
        with Image.open(io.BytesIO(data)) as im:
            return SourceImage(np.asarray(im.convert("RGB")))
    except UnidentifiedImageError:
        pass
    return decode_raw(data)


def load_image(path: str | Path) -> SourceImage:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise InvalidInput(f"cannot read image {path}: {exc.strerror or exc}") from exc
    try:
        return decode_image(data)
    except InvalidInput as exc:
        raise InvalidInput(f"{path}: not a PNG, JPEG or raw RGB image ({exc})") from exc


def save_image(image: SourceImage, path: str | Path) -> None:
    path = Path(path)
    if path.suffix.lower() == ".raw":
        path.write_bytes(image.to_raw())
    else:
        image.to_pil().save(path)


def grid_shape(width: int, height: int, cell_size: int) -> tuple[int, int]:
    """(rows, cols) of the lattice covering a ``width`` x ``height`` image."""
    return -(-height // cell_size), -(-width // cell_size)


@dataclass(frozen=True)
class Crop:
    grid_row: int
    grid_col: int
    rect: Rect
    pixels: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.pixels.shape[:2] != (self.rect.h, self.rect.w):
            raise InvalidInput("crop pixels do not match its rectangle")


@dataclass(frozen=True, eq=False)
class CropGrid:
    source: SourceImage
    cell_size: int
    rows: int
    cols: int

    @property
    def n_cells(self) -> int:
        return self.rows * self.cols

    def rect(self, row: int, col: int) -> Rect:
        if not (0 <= row < self.rows and 0 <= col < self.cols):
            raise IndexError(f"cell ({row}, {col}) outside {self.rows}x{self.cols} grid")
        x, y = col * self.cell_size, row * self.cell_size
        return Rect(
            x,
            y,
            min(self.cell_size, self.source.width - x),
            min(self.cell_size, self.source.height - y),
        )

    @cached_property
    def crop_rects(self) -> list[list[Rect]]:
        return [[self.rect(r, c) for c in range(self.cols)] for r in range(self.rows)]

    def cells(self) -> Iterator[tuple[int, int]]:
        for r in range(self.rows):
            for c in range(self.cols):
                yield r, c

    def flat(self, row: int, col: int) -> int:
        return row * self.cols + col

    def unflat(self, index: int) -> tuple[int, int]:
        return divmod(index, self.cols)

    def view(self, row: int, col: int) -> np.ndarray:
        """Read-only view of a cell's pixels (no copy)."""
        x, y, w, h = self.rect(row, col)
        return self.source.pixels[y:y + h, x:x + w]


def partition(image: SourceImage, cell_size: int = DEFAULT_CELL_SIZE) -> CropGrid:
    if cell_size < MIN_CELL_SIZE:
        raise InvalidConfig(f"cell_size must be >= {MIN_CELL_SIZE}, got {cell_size}")
    if image.width < 1 or image.height < 1:
        raise InvalidInput("cannot partition an empty image")
    rows, cols = grid_shape(image.width, image.height, cell_size)
    return CropGrid(image, cell_size, rows, cols)


def crop_at(grid: CropGrid, row: int, col: int) -> Crop:
    rect = grid.rect(row, col)
    return Crop(row, col, rect, grid.view(row, col).copy())


def reassemble(grid: CropGrid) -> SourceImage:
    """Stitch every crop back into one image; the inverse of :func:`partition`."""
    out = np.zeros_like(grid.source.pixels)
    for r, c in grid.cells():
        crop = crop_at(grid, r, c)
        x, y, w, h = crop.rect
        out[y:y + h, x:x + w] = crop.pixels
    return SourceImage(out)
