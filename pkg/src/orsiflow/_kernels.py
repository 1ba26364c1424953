"""Hot loops for convolution and resampling.

Each kernel has a numba implementation and a pure-numpy implementation with
identical semantics. The numba path is used when numba is importable and the
environment variable ``ORSIFLOW_NUMBA`` is not ``0``. Both paths are always
importable so tests and the benchmark can compare them directly.
"""
from __future__ import annotations

import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


USE_NUMBA = HAVE_NUMBA and os.environ.get("ORSIFLOW_NUMBA", "1") != "0"


# ---------------------------------------------------------------------------
# im2col / col2im
# ---------------------------------------------------------------------------


def im2col_numpy(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    """(N, C, H, W) padded input -> (N, C*k*k, Ho*Wo) patch matrix."""
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, k, k) -> (N, C, k, k, Ho, Wo)
    return np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3)).reshape(n, c * k * k, ho * wo)


def col2im_numpy(cols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    """Adjoint of :func:`im2col_numpy`; overlapping patches are summed."""
    n, c, h, w = shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    cols = cols.reshape(n, c, k, k, ho, wo)
    out = np.zeros(shape)
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += cols[:, :, i, j]
    return out


# Outputs are allocated by numpy and passed in: numba's own allocator
# page-faults on every fresh multi-megabyte buffer, which cost more than the loops.

@njit(cache=True)
def _im2col_nb(x, k, stride, out):
    n, c, h, w = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    for b in range(n):
        for ch in range(c):
            src = x[b, ch]
            for i in range(k):
                for j in range(k):
                    dst = out[b, (ch * k + i) * k + j]
                    for oy in range(ho):
                        line = src[oy * stride + i]
                        base = oy * wo
                        for ox in range(wo):
                            dst[base + ox] = line[ox * stride + j]
    return out


@njit(cache=True)
def _col2im_nb(cols, k, stride, out):
    n, c, h, w = out.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    for b in range(n):
        for ch in range(c):
            dst = out[b, ch]
            for i in range(k):
                for j in range(k):
                    src = cols[b, (ch * k + i) * k + j]
                    for oy in range(ho):
                        line = dst[oy * stride + i]
                        base = oy * wo
                        for ox in range(wo):
                            line[ox * stride + j] += src[base + ox]
    return out


def im2col_numba(x: np.ndarray, k: int, stride: int) -> np.ndarray:
    n, c, h, w = x.shape
    if k == 1 and stride == 1:
        return np.ascontiguousarray(x).reshape(n, c, h * w)
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    return _im2col_nb(np.ascontiguousarray(x), k, stride, np.empty((n, c * k * k, ho * wo)))


def col2im_numba(cols: np.ndarray, shape: tuple, k: int, stride: int) -> np.ndarray:
    return _col2im_nb(np.ascontiguousarray(cols), k, stride, np.zeros(shape))


# ---------------------------------------------------------------------------
# bilinear resize (align_corners=False)
# ---------------------------------------------------------------------------


def _source_index(out_size: int, in_size: int):
    scale = in_size / out_size
    src = (np.arange(out_size) + 0.5) * scale - 0.5
    src = np.maximum(src, 0.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), in_size - 1)
    i1 = np.minimum(i0 + 1, in_size - 1)
    lam = src - i0
    return i0, i1, lam


def interp_matrix(out_size: int, in_size: int) -> np.ndarray:
    """Dense (out_size, in_size) linear interpolation weights."""
    i0, i1, lam = _source_index(out_size, in_size)
    m = np.zeros((out_size, in_size))
    rows = np.arange(out_size)
    np.add.at(m, (rows, i0), 1.0 - lam)
    np.add.at(m, (rows, i1), lam)
    return m


def resize_numpy(x: np.ndarray, ho: int, wo: int) -> np.ndarray:
    mh = interp_matrix(ho, x.shape[-2])
    mw = interp_matrix(wo, x.shape[-1])
    return mh @ x @ mw.T


def resize_adjoint_numpy(g: np.ndarray, h: int, w: int) -> np.ndarray:
    mh = interp_matrix(g.shape[-2], h)
    mw = interp_matrix(g.shape[-1], w)
    return mh.T @ g @ mw


@njit(cache=True)
def _resize_nb(x, y0, y1, ly, x0, x1, lx, tmp, out):
    # separable: interpolate along W into a buffer, then along H
    n, c, h = x.shape[0], x.shape[1], x.shape[2]
    ho, wo = y0.shape[0], x0.shape[0]
    for b in range(n):
        for ch in range(c):
            src = x[b, ch]
            for iy in range(h):
                for ox in range(wo):
                    bx = lx[ox]
                    tmp[iy, ox] = (1.0 - bx) * src[iy, x0[ox]] + bx * src[iy, x1[ox]]
            dst = out[b, ch]
            for oy in range(ho):
                a = ly[oy]
                r0, r1 = y0[oy], y1[oy]
                for ox in range(wo):
                    dst[oy, ox] = (1.0 - a) * tmp[r0, ox] + a * tmp[r1, ox]
    return out


@njit(cache=True)
def _resize_adj_nb(g, y0, y1, ly, x0, x1, lx, tmp, out):
    n, c, h = out.shape[0], out.shape[1], out.shape[2]
    ho, wo = y0.shape[0], x0.shape[0]
    for b in range(n):
        for ch in range(c):
            src = g[b, ch]
            tmp[:, :] = 0.0
            for oy in range(ho):
                a = ly[oy]
                r0, r1 = y0[oy], y1[oy]
                for ox in range(wo):
                    v = src[oy, ox]
                    tmp[r0, ox] += (1.0 - a) * v
                    tmp[r1, ox] += a * v
            dst = out[b, ch]
            for iy in range(h):
                for ox in range(wo):
                    v = tmp[iy, ox]
                    bx = lx[ox]
                    dst[iy, x0[ox]] += (1.0 - bx) * v
                    dst[iy, x1[ox]] += bx * v
    return out


def resize_numba(x: np.ndarray, ho: int, wo: int) -> np.ndarray:
    y0, y1, ly = _source_index(ho, x.shape[-2])
    x0, x1, lx = _source_index(wo, x.shape[-1])
    n, c, h = x.shape[:3]
    return _resize_nb(np.ascontiguousarray(x), y0, y1, ly, x0, x1, lx, np.empty((h, wo)),
                      np.empty((n, c, ho, wo)))


def resize_adjoint_numba(g: np.ndarray, h: int, w: int) -> np.ndarray:
    y0, y1, ly = _source_index(g.shape[-2], h)
    x0, x1, lx = _source_index(g.shape[-1], w)
    n, c = g.shape[:2]
    return _resize_adj_nb(np.ascontiguousarray(g), y0, y1, ly, x0, x1, lx, np.empty((h, g.shape[-1])),
                          np.zeros((n, c, h, w)))


if USE_NUMBA:
    im2col = im2col_numba
    col2im = col2im_numba
    resize = resize_numba
    resize_adjoint = resize_adjoint_numba
else:
    im2col = im2col_numpy
    col2im = col2im_numpy
    resize = resize_numpy
    resize_adjoint = resize_adjoint_numpy

BACKEND = "numba" if USE_NUMBA else "numpy"
