"""PPM (P6) images as float arrays (3, H, W) in [0, 1], with bilinear resizing."""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np
from scipy import ndimage

from ..errors import BoundsError, CorruptHeaderError, UnsupportedFormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def decode_ppm(blob: bytes) -> np.ndarray:
    """uint8 array (H, W, 3) from a binary PPM."""
    if blob[:2] != b"P6":
        raise UnsupportedFormatError(f"not a binary PPM (magic {blob[:2]!r})")
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(blob, pos)
        if m is None:
            raise CorruptHeaderError("header ends early")
        try:
            fields.append(int(m.group(1)))
        except ValueError as exc:
            raise CorruptHeaderError(f"non-numeric header field {m.group(1)!r}") from exc
        pos = m.end()
    w, h, maxval = fields
    if w < 1 or h < 1:
        raise CorruptHeaderError(f"bad size {w}x{h}")
    if maxval != 255:
        raise UnsupportedFormatError(f"maxval {maxval}; only 255 is supported")
    if pos >= len(blob) or not blob[pos:pos + 1].isspace():
        raise CorruptHeaderError("missing whitespace after maxval")
    pos += 1
    need = w * h * 3
    if len(blob) - pos < need:
        raise CorruptHeaderError(f"pixel data truncated: {len(blob) - pos} of {need} bytes")
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3).copy()


def encode_ppm(pixels: np.ndarray) -> bytes:
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError(f"expected uint8 (H, W, 3), got {pixels.dtype} {pixels.shape}")
    h, w = pixels.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def to_uint8(image: np.ndarray) -> np.ndarray:
    """(3, H, W) floats in [0, 1] -> (H, W, 3) bytes, rounding to nearest."""
    return np.clip(np.rint(np.asarray(image).transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)


def resize_bilinear(image: np.ndarray, side: int) -> np.ndarray:
    """Resize (3, H, W) to (3, side, side).

    Pixel centers are aligned (half-pixel convention), edges are clamped.
    """
    c, h, w = image.shape
    if (h, w) == (side, side):
        return image.copy()
    ys = (np.arange(side) + 0.5) * (h / side) - 0.5
    xs = (np.arange(side) + 0.5) * (w / side) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    out = np.empty((c, side, side), dtype=image.dtype)
    for ch in range(c):
        out[ch] = ndimage.map_coordinates(image[ch], [yy, xx], order=1, mode="nearest")
    return out


def save_image(image: np.ndarray, path: str | os.PathLike) -> None:
    Path(path).write_bytes(encode_ppm(to_uint8(image)))


def load_image(path: str | os.PathLike, target_side: int | None = None) -> np.ndarray:
    """Float32 (3, side, side) in [0, 1]."""
    blob = Path(path).read_bytes()
    img = (decode_ppm(blob).transpose(2, 0, 1) / 255.0).astype(np.float32)
    return img if target_side is None else resize_bilinear(img, target_side)


def crop_and_rescale(image: np.ndarray, bbox: tuple[int, int, int, int], target_side: int) -> np.ndarray:
    """Crop (x, y, w, h) out of a (3, H, W) image and resize it to a square."""
    x, y, w, h = (int(v) for v in bbox)
    _, H, W = image.shape
    if w < 1 or h < 1 or x < 0 or y < 0 or x + w > W or y + h > H:
        raise BoundsError(f"bbox {bbox} outside a {W}x{H} image")
    return resize_bilinear(np.ascontiguousarray(image[:, y:y + h, x:x + w]), target_side)
