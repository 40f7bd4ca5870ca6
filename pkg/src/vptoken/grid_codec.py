"""Pixel boxes <-> k x k grid cells <-> Region Selection token groups.

Pixel boxes are half-open: ``[x_min, x_max) x [y_min, y_max)``, x to the
right and y downward from the top-left corner. Cell boxes are inclusive
cell indices ordered ``(col, row)``, i.e. ``(x, y)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .errors import (
    DegenerateRegionError,
    InvalidConfigError,
    InvertedRegionError,
    MalformedGroupError,
    OutOfRangeError,
)
from .vocab import Kind, Vocabulary, classify


@dataclass(frozen=True)
class GridSpec:
    k: int
    img_w: int
    img_h: int

    def __post_init__(self):
        if self.k < 2:
            raise InvalidConfigError(f"k must be >= 2, got {self.k}")
        if self.img_w < self.k or self.img_h < self.k:
            raise InvalidConfigError(
                f"image {self.img_w}x{self.img_h} smaller than the {self.k}x{self.k} grid"
            )


@dataclass(frozen=True)
class PixelBox:
    x_min: int
    y_min: int
    x_max: int
    y_max: int

    @property
    def width(self) -> int:
        return self.x_max - self.x_min

    @property
    def height(self) -> int:
        return self.y_max - self.y_min

    @property
    def area(self) -> int:
        return max(self.width, 0) * max(self.height, 0)

    @property
    def empty(self) -> bool:
        return self.width <= 0 or self.height <= 0

    def contains(self, other: "PixelBox") -> bool:
        return (
            self.x_min <= other.x_min
            and self.y_min <= other.y_min
            and self.x_max >= other.x_max
            and self.y_max >= other.y_max
        )

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)


@dataclass(frozen=True)
class CellBox:
    cx_min: int
    cy_min: int
    cx_max: int
    cy_max: int

    def valid_for(self, k: int) -> bool:
        return 0 <= self.cx_min <= self.cx_max < k and 0 <= self.cy_min <= self.cy_max < k

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.cx_min, self.cy_min, self.cx_max, self.cy_max)


def check_pixel_box(grid: GridSpec, b: PixelBox) -> None:
    if not (0 <= b.x_min <= b.x_max <= grid.img_w and 0 <= b.y_min <= b.y_max <= grid.img_h):
        raise OutOfRangeError(f"{b} outside a {grid.img_w}x{grid.img_h} image")


def cell_of_pixel(grid: GridSpec, px: int, py: int) -> tuple[int, int]:
    """Return ``(col, row)`` of the cell whose pixel span contains ``(px, py)``.

    Cell ``c`` spans ``[floor(c*w/k), floor((c+1)*w/k))``, so the owner of pixel
    ``p`` is the largest ``c`` with ``floor(c*w/k) <= p``, i.e.
    ``((p+1)*k - 1) // w``. This equals ``floor(p*k/w)`` whenever ``k`` divides
    ``w`` and stays consistent with ``cells_to_pixel_box`` when it does not.
    """
    if not (0 <= px < grid.img_w and 0 <= py < grid.img_h):
        raise OutOfRangeError(f"pixel ({px}, {py}) outside a {grid.img_w}x{grid.img_h} image")
    col = ((px + 1) * grid.k - 1) // grid.img_w
    row = ((py + 1) * grid.k - 1) // grid.img_h
    return col, row


def bbox_to_cells(grid: GridSpec, b: PixelBox) -> CellBox:
    check_pixel_box(grid, b)
    if b.empty:
        raise DegenerateRegionError(f"empty region {b}")
    x0, y0 = cell_of_pixel(grid, b.x_min, b.y_min)
    # bottom-right pixel of a half-open box
    x1, y1 = cell_of_pixel(grid, b.x_max - 1, b.y_max - 1)
    return CellBox(x0, y0, x1, y1)


def cells_to_pixel_box(grid: GridSpec, c: CellBox) -> PixelBox:
    """Corners at ``(x_min*w/k, y_min*h/k)`` and ``((x_max+1)*w/k, (y_max+1)*h/k)``, floored."""
    if not c.valid_for(grid.k):
        raise OutOfRangeError(f"{c} invalid for k={grid.k}")
    w, h, k = grid.img_w, grid.img_h, grid.k
    return PixelBox(
        c.cx_min * w // k,
        c.cy_min * h // k,
        (c.cx_max + 1) * w // k,
        (c.cy_max + 1) * h // k,
    )


def encode_region_tokens(vocab: Vocabulary, c: CellBox) -> list[int]:
    for idx in c.as_tuple():
        if not 0 <= idx < vocab.k:
            raise OutOfRangeError(f"cell index {idx} invalid for k={vocab.k}")
    return [
        vocab.region_start,
        vocab.x(c.cx_min),
        vocab.y(c.cy_min),
        vocab.x(c.cx_max),
        vocab.y(c.cy_max),
        vocab.region_end,
    ]


def decode_region_tokens(vocab: Vocabulary, ts: Sequence[int]) -> CellBox:
    ts = list(ts)
    if len(ts) != 6:
        raise MalformedGroupError(f"region group needs 6 tokens, got {len(ts)}")
    if ts[0] != vocab.region_start or ts[-1] != vocab.region_end:
        raise MalformedGroupError("region group must be delimited by start/end tokens")
    classes = [classify(vocab, t) for t in ts[1:5]]
    if [c.kind for c in classes] != [Kind.COORD_X, Kind.COORD_Y, Kind.COORD_X, Kind.COORD_Y]:
        raise MalformedGroupError("region interior must be x, y, x, y coordinate tokens")
    x0, y0, x1, y1 = (c.index for c in classes)
    if x1 < x0 or y1 < y0:
        raise InvertedRegionError(f"inverted region ({x0}, {y0}, {x1}, {y1})")
    return CellBox(x0, y0, x1, y1)


# -- raw pixel-coordinate baseline ------------------------------------------

RAW_DIGITS_PER_COORD = 3


def encode_raw_box_tokens(vocab: Vocabulary, b: PixelBox) -> list[int]:
    """Region group whose interior spells the pixel box as zero-padded digits."""
    digits: list[str] = []
    for v in b.as_tuple():
        if not 0 <= v < 10**RAW_DIGITS_PER_COORD:
            raise OutOfRangeError(f"coordinate {v} does not fit in {RAW_DIGITS_PER_COORD} digits")
        digits.extend(f"{v:0{RAW_DIGITS_PER_COORD}d}")
    return [vocab.region_start, *vocab.encode_text(digits), vocab.region_end]


def decode_raw_box_tokens(vocab: Vocabulary, ts: Sequence[int], grid: GridSpec) -> PixelBox:
    ts = list(ts)
    n = 4 * RAW_DIGITS_PER_COORD
    if len(ts) != n + 2 or ts[0] != vocab.region_start or ts[-1] != vocab.region_end:
        raise MalformedGroupError(f"raw box group needs {n + 2} tokens")
    text = [vocab.token_str(t) for t in ts[1:-1]]
    if not all(len(s) == 1 and s.isdigit() for s in text):
        raise MalformedGroupError("raw box interior must be digits")
    vals = [int("".join(text[i : i + RAW_DIGITS_PER_COORD])) for i in range(0, n, RAW_DIGITS_PER_COORD)]
    box = PixelBox(*vals)
    if box.x_max < box.x_min or box.y_max < box.y_min:
        raise InvertedRegionError(f"inverted box {box}")
    if box.empty:
        raise DegenerateRegionError(f"empty box {box}")
    check_pixel_box(grid, box)
    return box
