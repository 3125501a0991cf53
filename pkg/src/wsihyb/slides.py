"""Tiled raw slide container.

Layout (little endian)::

    magic    4s   b"WSIH"
    version  u16
    width    u32
    height   u32
    tile     u32
    channels u8
    tiles    ceil(h/tile) * ceil(w/tile) blocks of tile*tile*channels bytes,
             row-major over the tile grid; edge tiles are zero padded.

Files are opened through a read-only memmap so concurrent readers are safe.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MAGIC = b"WSIH"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIB")
HEADER_SIZE = _HEADER.size


class SlideFormatError(ValueError):
    pass


class OutOfBoundsError(IndexError):
    pass


@dataclass(frozen=True, order=True)
class PatchRef:
    slide_id: str
    x: int
    y: int
    size: int

    @property
    def key(self):
        return (self.slide_id, self.x, self.y)


def _grid(width, height, tile_size):
    return -(-height // tile_size), -(-width // tile_size)


def write_slide(path, pixels, tile_size):
    """Write an (H, W, C) uint8 array as a tiled container; returns the file's sha256 hex."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 3:
        raise ValueError("pixels must be an (H, W, C) uint8 array")
    height, width, channels = pixels.shape
    if width <= 0 or height <= 0 or tile_size <= 0:
        raise ValueError("slide and tile dimensions must be positive")
    rows, cols = _grid(width, height, tile_size)
    if (rows * tile_size, cols * tile_size) != (height, width):
        padded = np.zeros((rows * tile_size, cols * tile_size, channels), np.uint8)
        padded[:height, :width] = pixels
        pixels = padded
    tiles = np.ascontiguousarray(
        pixels.reshape(rows, tile_size, cols, tile_size, channels).transpose(0, 2, 1, 3, 4))
    header = _HEADER.pack(MAGIC, VERSION, width, height, tile_size, channels)
    digest = hashlib.sha256(header)
    digest.update(tiles)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(tiles.data)
    return digest.hexdigest()


class SlideImage:
    """Lazily read tiled slide; ``label`` and ``slide_id`` come from the manifest."""

    def __init__(self, path, slide_id=None, label=None):
        self.path = Path(path)
        with open(self.path, "rb") as fh:
            head = fh.read(HEADER_SIZE)
        if len(head) < HEADER_SIZE:
            raise SlideFormatError(f"{self.path}: truncated header")
        magic, version, width, height, tile, channels = _HEADER.unpack(head)
        if magic != MAGIC:
            raise SlideFormatError(f"{self.path}: bad magic {magic!r}")
        if version != VERSION:
            raise SlideFormatError(f"{self.path}: unsupported version {version}")
        if width == 0 or height == 0 or tile == 0 or channels == 0:
            raise SlideFormatError(f"{self.path}: zero dimension in header")
        self.width, self.height, self.tile_size, self.channels = width, height, tile, channels
        self.grid_rows, self.grid_cols = _grid(width, height, tile)
        expected = HEADER_SIZE + self.grid_rows * self.grid_cols * tile * tile * channels
        actual = self.path.stat().st_size
        if actual != expected:
            raise SlideFormatError(f"{self.path}: size {actual} != expected {expected}")
        self.slide_id = slide_id if slide_id is not None else self.path.stem
        self.label = label
        self._tiles = None

    def __repr__(self):
        return f"SlideImage({self.slide_id!r}, {self.width}x{self.height}, label={self.label})"

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_tiles"] = None
        return state

    @property
    def tiles(self):
        if self._tiles is None:
            self._tiles = np.memmap(
                self.path, dtype=np.uint8, mode="r", offset=HEADER_SIZE,
                shape=(self.grid_rows, self.grid_cols, self.tile_size, self.tile_size, self.channels),
            )
        return self._tiles

    def read_tile(self, row, col):
        """Raw bytes of one tile, padding included."""
        if not (0 <= row < self.grid_rows and 0 <= col < self.grid_cols):
            raise OutOfBoundsError(f"tile ({row}, {col}) outside {self.grid_rows}x{self.grid_cols} grid")
        return self.tiles[row, col].tobytes()

    def read_region(self, x, y, w, h):
        """Pixels of the rectangle [x, x+w) x [y, y+h) as an (h, w, C) array."""
        if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > self.width or y + h > self.height:
            raise OutOfBoundsError(
                f"region x={x} y={y} w={w} h={h} outside {self.width}x{self.height} slide"
            )
        ts = self.tile_size
        out = np.empty((h, w, self.channels), np.uint8)
        tiles = self.tiles
        for row in range(y // ts, (y + h - 1) // ts + 1):
            y0, y1 = max(y, row * ts), min(y + h, (row + 1) * ts)
            for col in range(x // ts, (x + w - 1) // ts + 1):
                x0, x1 = max(x, col * ts), min(x + w, (col + 1) * ts)
                out[y0 - y:y1 - y, x0 - x:x1 - x] = tiles[row, col, y0 - row * ts:y1 - row * ts,
                                                          x0 - col * ts:x1 - col * ts]
        return out

    def read_all(self):
        return self.read_region(0, 0, self.width, self.height)


def read_patch(slide, ref):
    """Bit-exact (size, size, C) pixels of ``ref``."""
    if ref.slide_id != slide.slide_id:
        raise ValueError(f"patch of {ref.slide_id!r} read from slide {slide.slide_id!r}")
    return slide.read_region(ref.x, ref.y, ref.size, ref.size)
