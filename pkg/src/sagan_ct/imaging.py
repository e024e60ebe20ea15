"""Image containers, HU windowing, tiling and the ``LDCT`` raster format.

The ``LDCT`` file is a 17-byte little-endian header followed by the pixels::

    4  magic   b"LDCT"
    1  u8      version (1)
    4  u32     width
    4  u32     height
    4  f32     pixel spacing (mm)
    4*w*h f32  pixels, row-major
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

HU_RANGE = (-1024.0, 3071.0)
ABDOMEN_WINDOW_LEVEL = 40.0
ABDOMEN_WINDOW_WIDTH = 400.0

IMAGE_MAGIC = b"LDCT"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sBIIf")
_F32 = np.dtype("<f4")


class ImageFormatError(ValueError):
    """Malformed or inconsistent image file."""


@dataclass(frozen=True, eq=False)
class Image2D:
    """An immutable single-channel raster stored as float32.

    ``data`` is indexed ``[row, column]``; rows run top to bottom.
    """

    data: np.ndarray
    pixel_spacing: float = 1.0

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float32, copy=True)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"Image2D needs a non-empty 2-D array, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("Image2D values must be finite")
        if not (np.isfinite(self.pixel_spacing) and self.pixel_spacing > 0):
            raise ValueError(f"pixel_spacing must be positive, got {self.pixel_spacing}")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)
        object.__setattr__(self, "pixel_spacing", float(np.float32(self.pixel_spacing)))

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return Image2D(data, self.pixel_spacing)

    def __eq__(self, other):
        if not isinstance(other, Image2D):
            return NotImplemented
        return (
            self.pixel_spacing == other.pixel_spacing
            and self.data.shape == other.data.shape
            and np.array_equal(self.data, other.data)
        )

    __hash__ = None


@dataclass(frozen=True)
class Window:
    level: float = ABDOMEN_WINDOW_LEVEL
    width: float = ABDOMEN_WINDOW_WIDTH

    def __post_init__(self):
        if not self.width > 0:
            raise ValueError(f"window width must be positive, got {self.width}")

    @property
    def lower(self):
        return self.level - self.width / 2

    @property
    def upper(self):
        return self.level + self.width / 2


ABDOMEN_WINDOW = Window()


@dataclass(frozen=True)
class RoiRect:
    x0: int
    y0: int
    w: int = 21
    h: int = 21

    def __post_init__(self):
        if self.w < 1 or self.h < 1:
            raise ValueError(f"ROI size must be at least 1x1, got {self.w}x{self.h}")

    def fits(self, shape):
        rows, cols = shape
        return self.x0 >= 0 and self.y0 >= 0 and self.x0 + self.w <= cols and self.y0 + self.h <= rows

    def slice(self):
        return np.s_[self.y0:self.y0 + self.h, self.x0:self.x0 + self.w]


def round_half_away(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def apply_window(img, win: Window = ABDOMEN_WINDOW) -> np.ndarray:
    """Map ``[level - width/2, level + width/2]`` linearly onto 0..255 (uint8)."""
    data = img.data if isinstance(img, Image2D) else np.asarray(img)
    scaled = (np.asarray(data, dtype=np.float64) - win.lower) / win.width * 255.0
    return round_half_away(np.clip(scaled, 0.0, 255.0)).astype(np.uint8)


def tile_quarters(img: Image2D) -> list[Image2D]:
    """Split into the four quadrants in row-major order (TL, TR, BL, BR)."""
    h, w = img.shape
    if h % 2 or w % 2:
        raise ValueError(f"tile_quarters needs even dimensions, got {w}x{h}")
    hh, hw = h // 2, w // 2
    d = img.data
    return [img.with_data(d[r:r + hh, c:c + hw]) for r in (0, hh) for c in (0, hw)]


def untile_quarters(tiles) -> Image2D:
    tl, tr, bl, br = tiles
    data = np.block([[tl.data, tr.data], [bl.data, br.data]])
    return tl.with_data(data)


# -- file I/O ------------------------------------------------------------------


def encode_image(img: Image2D) -> bytes:
    header = _HEADER.pack(IMAGE_MAGIC, FORMAT_VERSION, img.width, img.height, img.pixel_spacing)
    return header + img.data.astype(_F32).tobytes()


def decode_image(buf: bytes, source="<bytes>") -> Image2D:
    if len(buf) < _HEADER.size:
        raise ImageFormatError(f"{source}: file too short for an LDCT header ({len(buf)} bytes)")
    magic, version, width, height, spacing = _HEADER.unpack_from(buf)
    if magic != IMAGE_MAGIC:
        raise ImageFormatError(f"{source}: bad magic {magic!r}, expected {IMAGE_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise ImageFormatError(f"{source}: unsupported version {version}")
    if width == 0 or height == 0:
        raise ImageFormatError(f"{source}: empty image {width}x{height}")
    payload = buf[_HEADER.size:]
    if len(payload) % 4:
        raise ImageFormatError(f"{source}: payload is not a whole number of float32 values")
    count = len(payload) // 4
    if count != width * height:
        raise ImageFormatError(
            f"{source}: size mismatch, header declares {width}x{height}={width * height} "
            f"pixels but payload holds {count}"
        )
    data = np.frombuffer(payload, dtype=_F32).reshape(height, width)
    if not np.all(np.isfinite(data)):
        bad = int(np.count_nonzero(~np.isfinite(data)))
        raise ImageFormatError(f"{source}: {bad} non-finite pixel value(s)")
    if not (np.isfinite(spacing) and spacing > 0):
        raise ImageFormatError(f"{source}: invalid pixel spacing {spacing}")
    return Image2D(data, float(spacing))


def write_image(path, img: Image2D):
    Path(path).write_bytes(encode_image(img))


def read_image(path) -> Image2D:
    path = Path(path)
    return decode_image(path.read_bytes(), source=str(path))


def write_pgm(path, pixels: np.ndarray):
    """Write an 8-bit image as binary PGM (P5)."""
    pixels = np.asarray(pixels)
    if pixels.dtype != np.uint8 or pixels.ndim != 2:
        raise ValueError("write_pgm expects a 2-D uint8 array")
    h, w = pixels.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    buf = Path(path).read_bytes()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+255\s", buf)
    if m is None:
        raise ImageFormatError(f"{path}: not an 8-bit binary PGM")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(buf[m.end():], dtype=np.uint8)
    if pixels.size != w * h:
        raise ImageFormatError(f"{path}: size mismatch")
    return pixels.reshape(h, w)
