"""
Binary raster masks, the COCO-style RLE codec, and the Boolean edit engine.

Every operation here is a pure function over immutable RasterMask values:
edits return fresh masks and never touch their inputs, so trace entries can
hold on to pre-edit masks safely.
"""

import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .choices import EditOp
from .exceptions import DimensionMismatch, EmptyInput, MalformedRle


@dataclass(frozen=True, eq=False)
class RasterMask:
    """
    Dense binary mask.

    Attributes:
        width (int): Pixel columns (> 0)
        height (int): Pixel rows (> 0)
        bits (np.ndarray): Read-only bool array of shape (height, width)
    """
    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise DimensionMismatch(f"mask dimensions must be positive, got {self.width}x{self.height}")
        bits = np.array(self.bits, dtype=bool, copy=True)
        if bits.shape != (self.height, self.width):
            raise DimensionMismatch(
                f"bits shape {bits.shape} does not match {self.height}x{self.width}"
            )
        bits.setflags(write=False)
        object.__setattr__(self, 'bits', bits)

    @classmethod
    def empty(cls, width: int, height: int) -> 'RasterMask':
        return cls(width, height, np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> 'RasterMask':
        return cls(width, height, np.ones((height, width), dtype=bool))

    @classmethod
    def from_array(cls, array) -> 'RasterMask':
        """Build from any 2-D array; nonzero entries are foreground."""
        array = np.asarray(array)
        if array.ndim != 2:
            raise DimensionMismatch(f"expected a 2-D array, got {array.ndim}-D")
        height, width = array.shape
        return cls(width, height, array != 0)

    @classmethod
    def from_rows(cls, width: int, height: int, rows: Iterable[int]) -> 'RasterMask':
        """Mask with whole rows set; handy for small fixtures."""
        bits = np.zeros((height, width), dtype=bool)
        for row in rows:
            bits[row, :] = True
        return cls(width, height, bits)

    @classmethod
    def from_png(cls, path) -> 'RasterMask':
        with Image.open(path) as image:
            return cls.from_array(np.asarray(image.convert('L')) > 127)

    @property
    def shape(self):
        return (self.height, self.width)

    def to_image(self) -> Image.Image:
        """Binary 0/255 grayscale image."""
        return Image.fromarray(self.bits.astype(np.uint8) * 255)

    def to_png(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        self.to_image().save(path, format='PNG')
        return path

    def __eq__(self, other):
        if not isinstance(other, RasterMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.bits, other.bits)

    __hash__ = None

    def __repr__(self):
        return f"RasterMask({self.width}x{self.height}, area={area(self)})"


@dataclass(frozen=True)
class Rle:
    """
    Uncompressed COCO run-length encoding (column-major scan).

    counts alternate background/foreground runs, starting with background;
    only the first run may be zero.
    """
    counts: tuple
    width: int
    height: int

    def __post_init__(self):
        counts = tuple(self.counts)
        object.__setattr__(self, 'counts', counts)
        if self.width <= 0 or self.height <= 0:
            raise MalformedRle(f"RLE dimensions must be positive, got {self.width}x{self.height}")
        for index, count in enumerate(counts):
            if isinstance(count, bool) or not isinstance(count, (int, np.integer)):
                raise MalformedRle(f"count at position {index} is not an integer: {count!r}")
            if count < 0:
                raise MalformedRle(f"negative count {count} at position {index}")
            if count == 0 and index > 0:
                raise MalformedRle(f"zero-length run at position {index}")
        total = sum(int(c) for c in counts)
        if total != self.width * self.height:
            raise MalformedRle(
                f"counts sum to {total}, expected {self.width * self.height} for {self.width}x{self.height}"
            )

    def to_json(self) -> dict:
        return {'size': [self.height, self.width], 'counts': [int(c) for c in self.counts]}

    @classmethod
    def from_json(cls, payload) -> 'Rle':
        if not isinstance(payload, dict):
            raise MalformedRle("RLE must be an object with 'size' and 'counts'")
        size = payload.get('size')
        counts = payload.get('counts')
        if not isinstance(size, (list, tuple)) or len(size) != 2:
            raise MalformedRle("RLE 'size' must be [height, width]")
        if not isinstance(counts, (list, tuple)):
            raise MalformedRle("RLE 'counts' must be a list of integers (compressed strings are not supported)")
        height, width = size
        if not all(isinstance(v, int) and not isinstance(v, bool) for v in (height, width)):
            raise MalformedRle("RLE 'size' entries must be integers")
        return cls(tuple(counts), width, height)


def _check_same_shape(*masks: RasterMask):
    first = masks[0]
    for mask in masks[1:]:
        if mask.shape != first.shape:
            raise DimensionMismatch(
                f"mask {mask.width}x{mask.height} does not match {first.width}x{first.height}"
            )


def union(a: RasterMask, b: RasterMask) -> RasterMask:
    _check_same_shape(a, b)
    return RasterMask(a.width, a.height, a.bits | b.bits)


def subtract(a: RasterMask, b: RasterMask) -> RasterMask:
    _check_same_shape(a, b)
    return RasterMask(a.width, a.height, a.bits & ~b.bits)


def intersect(a: RasterMask, b: RasterMask) -> RasterMask:
    _check_same_shape(a, b)
    return RasterMask(a.width, a.height, a.bits & b.bits)


def complement(m: RasterMask) -> RasterMask:
    return RasterMask(m.width, m.height, ~m.bits)


def area(m: RasterMask) -> int:
    return int(np.count_nonzero(m.bits))


def rle_encode(m: RasterMask) -> Rle:
    flat = m.bits.flatten(order='F')
    # Run boundaries are the positions where the value flips.
    change_points = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    edges = np.concatenate(([0], change_points, [flat.size]))
    runs = np.diff(edges).tolist()
    if flat[0]:
        runs.insert(0, 0)
    return Rle(tuple(int(r) for r in runs), m.width, m.height)


def rle_decode(r: Rle, width: int, height: int) -> RasterMask:
    if (r.width, r.height) != (width, height):
        raise MalformedRle(f"RLE is {r.width}x{r.height}, expected {width}x{height}")
    values = np.arange(len(r.counts)) % 2 == 1
    flat = np.repeat(values, r.counts)
    return RasterMask(width, height, flat.reshape((height, width), order='F'))


def merge_all(masks: Sequence[RasterMask]) -> RasterMask:
    if not masks:
        raise EmptyInput("merge_all needs at least one mask")
    _check_same_shape(*masks)
    first = masks[0]
    return RasterMask(first.width, first.height, np.logical_or.reduce([m.bits for m in masks]))


def apply_edit(working: RasterMask, op: EditOp, selected: Sequence[RasterMask]) -> RasterMask:
    """
    Apply an Add/Remove/Replace edit with the union of the selected masks.

    Replace discards the working content entirely.
    """
    if not selected:
        raise EmptyInput(f"{EditOp(op).label} needs at least one selected mask")
    _check_same_shape(working, *selected)
    selection = merge_all(selected)
    op = EditOp(op)
    if op == EditOp.ADD:
        return union(working, selection)
    if op == EditOp.REMOVE:
        return subtract(working, selection)
    return selection


def mask_digest(m: RasterMask) -> str:
    """Stable content hash used by trace replay."""
    digest = hashlib.sha256(f"{m.width}x{m.height}:".encode())
    digest.update(np.packbits(m.bits, axis=None).tobytes())
    return digest.hexdigest()
