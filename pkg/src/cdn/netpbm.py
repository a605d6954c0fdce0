"""Binary PGM (P5) / PPM (P6) reading and writing, maxval 255 only."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    pass


@dataclass
class ImageBuffer:
    """8-bit image, row-major HWC."""

    width: int
    height: int
    channels: int
    pixels: np.ndarray

    def __post_init__(self) -> None:
        if self.channels not in (1, 3):
            raise ImageFormatError("only 1 or 3 channels are supported")
        self.pixels = np.asarray(self.pixels, dtype=np.uint8).reshape(self.height, self.width, self.channels)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        arr = np.asarray(arr)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        h, w, c = arr.shape
        return cls(w, h, c, arr)

    def to_float(self) -> np.ndarray:
        """(C, H, W) float32 in [0, 1]."""
        return (self.pixels.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0))

    @classmethod
    def from_float(cls, chw: np.ndarray) -> "ImageBuffer":
        q = np.clip(np.rint(np.asarray(chw, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
        return cls.from_array(q.transpose(1, 2, 0))


def _tokens(data: bytes, count: int) -> tuple[list[bytes], int]:
    """Read ``count`` whitespace-separated header tokens, skipping # comments."""
    out: list[bytes] = []
    i, n = 0, len(data)
    while len(out) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise ImageFormatError("truncated header")
        out.append(data[start:i])
    # exactly one whitespace byte separates the header from the raster
    if i >= n or not data[i:i + 1].isspace():
        raise ImageFormatError("malformed header terminator")
    return out, i + 1


def decode(data: bytes) -> ImageBuffer:
    (magic, *dims), offset = _tokens(data, 4)
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"unsupported magic {magic!r}; only P5/P6 are handled")
    try:
        width, height, maxval = (int(t) for t in dims)
    except ValueError:
        raise ImageFormatError(f"malformed header fields {dims!r}") from None
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 255 is handled")
    if width <= 0 or height <= 0:
        raise ImageFormatError("image dimensions must be positive")
    channels = 1 if magic == b"P5" else 3
    need = width * height * channels
    raster = data[offset:offset + need]
    if len(raster) != need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes, got {len(raster)}")
    return ImageBuffer(width, height, channels, np.frombuffer(raster, dtype=np.uint8))


def encode(buf: ImageBuffer) -> bytes:
    magic = b"P5" if buf.channels == 1 else b"P6"
    header = magic + b"\n%d %d\n255\n" % (buf.width, buf.height)
    return header + np.ascontiguousarray(buf.pixels, dtype=np.uint8).tobytes()


def load_image(path: str | Path) -> ImageBuffer:
    return decode(Path(path).read_bytes())


def save_image(buf: ImageBuffer, path: str | Path) -> None:
    Path(path).write_bytes(encode(buf))
