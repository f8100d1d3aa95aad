"""Pure numpy versions of the compiled kernels in ``_fast.pyx``.

Same signatures, same floating-point operation order, so outputs match the
compiled path bit for bit.
"""

import numpy as np


def percentiles_u16(plane, rank_low, rank_high):
    flat = np.asarray(plane, dtype=np.uint16).ravel()
    part = np.partition(flat, (rank_low - 1, rank_high - 1))
    return int(part[rank_low - 1]), int(part[rank_high - 1])


def rescale_u16_to_u8(plane, low, high):
    low = float(low)
    high = float(high)
    values = np.arange(65536, dtype=np.float64)
    scaled = np.floor(255.0 * (values - low) / (high - low) + 0.5)
    lut = np.where(values <= low, 0.0, np.where(values >= high, 255.0, scaled)).astype(np.uint8)
    return lut[np.asarray(plane, dtype=np.uint16)]


def bilinear_resize_u8(src, y0, y1, wy, x0, x1, wx):
    src = np.asarray(src, dtype=np.uint8)
    fx = wx[None, :]
    fy = wy[:, None]
    p00 = src[np.ix_(y0, x0)].astype(np.float64)
    p01 = src[np.ix_(y0, x1)].astype(np.float64)
    p10 = src[np.ix_(y1, x0)].astype(np.float64)
    p11 = src[np.ix_(y1, x1)].astype(np.float64)
    top = (1.0 - fx) * p00 + fx * p01
    bottom = (1.0 - fx) * p10 + fx * p11
    val = np.floor((1.0 - fy) * top + fy * bottom + 0.5)
    return np.clip(val, 0, 255).astype(np.uint8)
