# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: footprint unfold/fold and block-matching search."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor, fabs

ctypedef fused floating:
    float
    double


def unfold(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_b = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = (h + 2 * pad - kh) // stride + 1
    cdef Py_ssize_t wo = (w + 2 * pad - kw) // stride + 1
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_b, ho, wo, kh * kw, c), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, ky, kx, ch, iy, ix, k
    with nogil:
        for n in range(n_b):
            for oy in range(ho):
                for ox in range(wo):
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= w:
                                continue
                            k = ky * kw + kx
                            for ch in range(c):
                                out[n, oy, ox, k, ch] = x[n, iy, ix, ch]
    return out_arr


def fold(floating[:, :, :, :, ::1] g, int h, int w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n_b = g.shape[0], ho = g.shape[1], wo = g.shape[2], c = g.shape[4]
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n_b, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t n, oy, ox, ky, kx, ch, iy, ix, k
    with nogil:
        for n in range(n_b):
            for oy in range(ho):
                for ox in range(wo):
                    for ky in range(kh):
                        iy = oy * stride - pad + ky
                        if iy < 0 or iy >= h:
                            continue
                        for kx in range(kw):
                            ix = ox * stride - pad + kx
                            if ix < 0 or ix >= w:
                                continue
                            k = ky * kw + kx
                            for ch in range(c):
                                out[n, iy, ix, ch] += g[n, oy, ox, k, ch]
    return out_arr


cdef inline double _bilinear(double[:, ::1] img, double y, double x) nogil:
    cdef Py_ssize_t h = img.shape[0], w = img.shape[1]
    if y < 0:
        y = 0
    elif y > h - 1:
        y = h - 1
    if x < 0:
        x = 0
    elif x > w - 1:
        x = w - 1
    cdef Py_ssize_t y0 = <Py_ssize_t>floor(y), x0 = <Py_ssize_t>floor(x)
    cdef Py_ssize_t y1 = y0 + 1 if y0 + 1 < h else y0
    cdef Py_ssize_t x1 = x0 + 1 if x0 + 1 < w else x0
    cdef double fy = y - y0, fx = x - x0
    return ((1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1])
            + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1]))


def match_candidates(double[:, ::1] a, double[:, ::1] b,
                     double[:, ::1] init_u, double[:, ::1] init_v,
                     double[:, ::1] offsets, int half, double max_disp):
    """Per-pixel best displacement among ``init + offsets[k]`` by block SSD.

    Candidates are scanned in the given order and replaced only on a strictly
    lower cost, so earlier offsets win ties.
    """
    cdef Py_ssize_t h = a.shape[0], w = a.shape[1], n_off = offsets.shape[0]
    out_u_arr = np.empty((h, w), dtype=np.float64)
    out_v_arr = np.empty((h, w), dtype=np.float64)
    cdef double[:, ::1] out_u = out_u_arr
    cdef double[:, ::1] out_v = out_v_arr
    cdef Py_ssize_t y, x, k, by, bx, ay, ax
    cdef double du, dv, cost, best, best_u, best_v, diff
    with nogil:
        for y in range(h):
            for x in range(w):
                best = -1.0
                best_u = init_u[y, x]
                best_v = init_v[y, x]
                for k in range(n_off):
                    du = init_u[y, x] + offsets[k, 0]
                    dv = init_v[y, x] + offsets[k, 1]
                    if fabs(du) > max_disp or fabs(dv) > max_disp:
                        continue
                    cost = 0.0
                    for by in range(-half, half + 1):
                        ay = y + by
                        if ay < 0:
                            ay = 0
                        elif ay >= h:
                            ay = h - 1
                        for bx in range(-half, half + 1):
                            ax = x + bx
                            if ax < 0:
                                ax = 0
                            elif ax >= w:
                                ax = w - 1
                            diff = a[ay, ax] - _bilinear(b, ay + dv, ax + du)
                            cost = cost + diff * diff
                    if best < 0 or cost < best:
                        best = cost
                        best_u = du
                        best_v = dv
                out_u[y, x] = best_u
                out_v[y, x] = best_v
    return out_u_arr, out_v_arr
