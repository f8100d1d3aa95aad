"""Per-plane operations: 16->8 bit rescale, center crop + resize, PNG codec."""

from __future__ import annotations

import io
import math
import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
from PIL import Image

from mvclip import _kernels

N_CHANNELS = 5
TARGET_SIZE = 768
PNG_LEVEL = 6


@dataclass
class RawPlane:
    """One 16-bit channel of a field of view."""

    pixels: np.ndarray
    channel_index: int
    well_ref: str = ""

    def __post_init__(self):
        if self.pixels.ndim != 2 or min(self.pixels.shape) < 1:
            raise ValueError(f"plane must be a non-empty 2-D grid, got {self.pixels.shape}")
        if not 0 <= self.channel_index < N_CHANNELS:
            raise ValueError(f"channel_index must be in 0..{N_CHANNELS - 1}")


@dataclass
class ProcessedPlane:
    """One 8-bit, square, resized channel ready for encoding."""

    pixels: np.ndarray
    channel_index: int
    degenerate: bool = False
    upscaled: bool = False


class Rescaled(NamedTuple):
    pixels: np.ndarray
    low: int
    high: int
    degenerate: bool


def nearest_rank(p: float, n: int) -> int:
    """1-based nearest-rank position of the ``p``-th percentile among ``n`` values."""
    if not 0 <= p <= 100:
        raise ValueError(f"percentile must be in [0, 100], got {p}")
    return min(n, max(1, math.ceil(Fraction(p) * n / 100)))


def _pixels(plane) -> np.ndarray:
    return np.asarray(getattr(plane, "pixels", plane))


def rescale_16_to_8(plane, p_low: float = 1.0, p_high: float = 99.0) -> Rescaled:
    """Map the [p_low, p_high] percentile window of a 16-bit plane onto 0..255.

    Percentiles use the nearest-rank definition. Pixels at or below the low
    value become 0, at or above the high value 255, and the rest are scaled
    linearly and rounded half up. When both percentiles coincide the plane
    carries no usable range: the output is all zeros and ``degenerate`` is set.
    """
    if not 0 <= p_low < p_high <= 100:
        raise ValueError(f"need 0 <= p_low < p_high <= 100, got {p_low}, {p_high}")
    pix = np.ascontiguousarray(_pixels(plane), dtype=np.uint16)
    if pix.ndim != 2 or pix.size == 0:
        raise ValueError(f"plane must be a non-empty 2-D grid, got {pix.shape}")
    n = pix.size
    low, high = _kernels.percentiles_u16(pix, nearest_rank(p_low, n), nearest_rank(p_high, n))
    if low == high:
        return Rescaled(np.zeros(pix.shape, dtype=np.uint8), low, high, True)
    return Rescaled(_kernels.rescale_u16_to_u8(pix, float(low), float(high)), low, high, False)


def _axis_coefficients(n_in: int, n_out: int):
    # half-pixel centres, edge samples clamped
    scale = n_in / n_out
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def center_square(pix: np.ndarray) -> np.ndarray:
    """Largest centred square; an odd margin leaves the extra row/column at the bottom/right."""
    h, w = pix.shape
    side = min(h, w)
    top = (h - side) // 2
    left = (w - side) // 2
    return pix[top : top + side, left : left + side]


def center_crop_resize(plane, target: int = TARGET_SIZE) -> ProcessedPlane:
    """Center-crop an 8-bit plane to a square, then bilinear-resize to ``target``.

    Planes smaller than ``target`` are upscaled and flagged.
    """
    pix = np.asarray(_pixels(plane), dtype=np.uint8)
    if pix.ndim != 2 or pix.size == 0:
        raise ValueError(f"plane must be a non-empty 2-D grid, got {pix.shape}")
    square = center_square(pix)
    side = square.shape[0]
    y0, y1, wy = _axis_coefficients(side, target)
    out = _kernels.bilinear_resize_u8(square, y0, y1, wy, y0, y1, wy)
    return ProcessedPlane(
        pixels=out,
        channel_index=getattr(plane, "channel_index", 0),
        upscaled=side < target,
    )


def encode_png(pixels: np.ndarray, level: int = PNG_LEVEL) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint8)).save(
        buf, format="PNG", compress_level=level
    )
    return buf.getvalue()


def decode_png(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode != "L":
            raise ValueError(f"{path}: expected single-channel 8-bit PNG, got mode {im.mode}")
        return np.array(im)


def channel_filename(stem: str, channel: int) -> str:
    return f"{stem}_ch{channel}.png"


def encode_channels(planes: Sequence, out_dir, stem: str) -> list[Path]:
    """Write each plane as a single-channel PNG named ``{stem}_ch{c}.png``.

    Files are written to a temporary name and renamed, so an interrupted run
    never leaves a truncated PNG under the final name.

    Raises:
        OSError: On write failure; the message carries the path.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for c, plane in enumerate(planes):
        channel = getattr(plane, "channel_index", c)
        path = out_dir / channel_filename(stem, channel)
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_bytes(encode_png(_pixels(plane)))
            os.replace(tmp, path)
        except OSError as exc:
            raise OSError(f"failed to write {path}: {exc}") from exc
        paths.append(path)
    return paths


def read_tiff16(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.array(im)
    if arr.ndim != 2:
        raise ValueError(f"{path}: expected a single-channel image, got shape {arr.shape}")
    return arr.astype(np.uint16, copy=False)


def write_tiff16(path, pixels: np.ndarray):
    Image.fromarray(np.ascontiguousarray(pixels, dtype=np.uint16)).save(path, format="TIFF")


def tiff_shape(path) -> tuple[int, int]:
    """Height and width from the header, without decoding pixels."""
    with Image.open(path) as im:
        w, h = im.size
    return h, w
