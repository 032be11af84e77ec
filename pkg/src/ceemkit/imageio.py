"""Grayscale image I/O on top of Pillow, plus the bilinear resampler.

Readable: any 8-bit image Pillow decodes, in practice PGM (P2/P5, maxval
rescaled to 255) and PNG (gray, gray+alpha, RGB, RGBA, palette). Colour is
reduced to ITU-R BT.601 luma in float64; alpha is dropped. 16-bit and float
images are rejected. Writing emits 8-bit gray PNG or binary P5 PGM.
"""

from __future__ import annotations

import io
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ImageFileError

LUMA = np.array([0.299, 0.587, 0.114])  # ITU-R BT.601
_GRAY_MODES = {"L", "LA", "1"}
_COLOUR_MODES = {"RGB", "RGBA", "P", "PA", "CMYK", "YCbCr"}


def decode(data: bytes) -> np.ndarray:
    """Decode image bytes to a float64 [H, W] plane in [0, 255]."""
    with Image.open(io.BytesIO(data)) as im:
        im.load()
        if im.mode in _GRAY_MODES:
            return np.asarray(im.convert("L"), dtype=np.float64)
        if im.mode in _COLOUR_MODES:
            return np.asarray(im.convert("RGB"), dtype=np.float64) @ LUMA
        raise ValueError(f"unsupported pixel mode {im.mode} (8-bit images only)")


def encode(img: np.ndarray, fmt: str = "PNG") -> bytes:
    """Round to 8-bit gray and encode as ``PNG`` or ``PPM`` (binary P5 PGM)."""
    if img.ndim != 2:
        raise ValueError(f"expected a 2-D image, got shape {img.shape}")
    px = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(px).save(buf, format=fmt)
    return buf.getvalue()


def read_image(path) -> np.ndarray:
    """Read an image file as a float64 [H, W] plane in [0, 255]."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise ImageFileError(path, e.strerror or str(e)) from None
    try:
        return decode(data)
    except (OSError, ValueError, SyntaxError, Image.DecompressionBombError) as e:
        raise ImageFileError(path, str(e) or type(e).__name__) from None


def write_image(path, img: np.ndarray) -> None:
    """Write by extension: ``.png`` or anything else as binary PGM."""
    path = Path(path)
    data = encode(img, "PNG" if path.suffix.lower() == ".png" else "PPM")
    try:
        path.write_bytes(data)
    except OSError as e:
        raise ImageFileError(path, e.strerror or str(e)) from None


def resize_bilinear(img: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resampling with half-pixel centres and edge clamping (no antialiasing)."""
    h, w = img.shape

    def axis(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        i0 = np.floor(src).astype(int)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, src - i0

    y0, y1, fy = axis(height, h)
    x0, x1, fx = axis(width, w)
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy[:, None]) + bot * fy[:, None]
