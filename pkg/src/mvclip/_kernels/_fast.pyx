# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled image kernels. Same contracts and bit-identical output as _fallback."""

from libc.math cimport floor
from libc.stdlib cimport calloc, free

import numpy as np

ctypedef unsigned short u16
ctypedef unsigned char u8


def percentiles_u16(const u16[:, :] plane, Py_ssize_t rank_low, Py_ssize_t rank_high):
    """Values at 1-based ranks ``rank_low`` and ``rank_high`` of the sorted plane.

    Counting sort over the 16-bit domain: one pass, no copy of the pixels.
    """
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1]
    cdef Py_ssize_t i, j, v, seen = 0
    cdef Py_ssize_t lo = -1, hi = -1
    cdef Py_ssize_t *hist = <Py_ssize_t *> calloc(65536, sizeof(Py_ssize_t))
    if hist == NULL:
        raise MemoryError()
    try:
        with nogil:
            for i in range(h):
                for j in range(w):
                    hist[plane[i, j]] += 1
            for v in range(65536):
                seen += hist[v]
                if lo < 0 and seen >= rank_low:
                    lo = v
                if seen >= rank_high:
                    hi = v
                    break
    finally:
        free(hist)
    return int(lo), int(hi)


def rescale_u16_to_u8(const u16[:, :] plane, double low, double high):
    """Linear map of [low, high] onto [0, 255]; clamps outside, rounds half up."""
    cdef Py_ssize_t h = plane.shape[0], w = plane.shape[1]
    cdef Py_ssize_t i, j, v
    cdef double span = high - low
    lut_arr = np.empty(65536, dtype=np.uint8)
    out_arr = np.empty((h, w), dtype=np.uint8)
    cdef u8[::1] lut = lut_arr
    cdef u8[:, ::1] out = out_arr
    with nogil:
        for v in range(65536):
            if v <= low:
                lut[v] = 0
            elif v >= high:
                lut[v] = 255
            else:
                lut[v] = <u8> floor(255.0 * (v - low) / span + 0.5)
        for i in range(h):
            for j in range(w):
                out[i, j] = lut[plane[i, j]]
    return out_arr


def bilinear_resize_u8(
    const u8[:, :] src,
    const Py_ssize_t[::1] y0,
    const Py_ssize_t[::1] y1,
    const double[::1] wy,
    const Py_ssize_t[::1] x0,
    const Py_ssize_t[::1] x1,
    const double[::1] wx,
):
    """Blend the four neighbours given per-axis indices and weights."""
    cdef Py_ssize_t oh = y0.shape[0], ow = x0.shape[0]
    cdef Py_ssize_t i, j
    cdef double fy, fx, top, bottom, val
    out_arr = np.empty((oh, ow), dtype=np.uint8)
    cdef u8[:, ::1] out = out_arr
    with nogil:
        for i in range(oh):
            fy = wy[i]
            for j in range(ow):
                fx = wx[j]
                top = (1.0 - fx) * src[y0[i], x0[j]] + fx * src[y0[i], x1[j]]
                bottom = (1.0 - fx) * src[y1[i], x0[j]] + fx * src[y1[i], x1[j]]
                val = floor((1.0 - fy) * top + fy * bottom + 0.5)
                if val < 0:
                    val = 0
                elif val > 255:
                    val = 255
                out[i, j] = <u8> val
    return out_arr
