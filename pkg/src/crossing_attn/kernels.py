"""Hot kernels with a compiled backend and a pure-numpy fallback.

The compiled module ``crossing_attn._kernels`` is used when it imports;
setting ``CROSSING_ATTN_PURE=1`` forces the numpy path.  Both paths are
exposed as ``numpy_*`` / ``compiled`` so tests can compare them directly.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("CROSSING_ATTN_PURE", "") not in ("", "0"):
        raise ImportError("pure-python kernels requested")
    from crossing_attn import _kernels as compiled
except ImportError:
    compiled = None

BACKEND = "cython" if compiled is not None else "numpy"


def out_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def numpy_unfold(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, h, w, c = x.shape
    ho, wo = out_extent(h, kh, stride, pad), out_extent(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    out = np.empty((n, ho, wo, kh * kw, c), dtype=x.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, :, :, ky * kw + kx, :] = xp[
                :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :
            ]
    return out


def numpy_fold(g: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    n, ho, wo, _, c = g.shape
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=g.dtype)
    for ky in range(kh):
        for kx in range(kw):
            out[:, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride, :] += g[
                :, :, :, ky * kw + kx, :
            ]
    return out[:, pad : pad + h, pad : pad + w, :]


def _bilinear(img: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    h, w = img.shape
    y = np.clip(y, 0, h - 1)
    x = np.clip(x, 0, w - 1)
    y0 = np.floor(y).astype(np.intp)
    x0 = np.floor(x).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = y - y0
    fx = x - x0
    return (1 - fy) * ((1 - fx) * img[y0, x0] + fx * img[y0, x1]) + fy * ((1 - fx) * img[y1, x0] + fx * img[y1, x1])


def numpy_match_candidates(a, b, init_u, init_v, offsets, half, max_disp):
    h, w = a.shape
    ys, xs = np.mgrid[0:h, 0:w]
    best = np.full((h, w), np.inf)
    best_u = init_u.copy()
    best_v = init_v.copy()
    for off_u, off_v in offsets:
        du = init_u + off_u
        dv = init_v + off_v
        valid = (np.abs(du) <= max_disp) & (np.abs(dv) <= max_disp)
        cost = np.zeros((h, w))
        for by in range(-half, half + 1):
            ay = np.clip(ys + by, 0, h - 1)
            for bx in range(-half, half + 1):
                ax = np.clip(xs + bx, 0, w - 1)
                diff = a[ay, ax] - _bilinear(b, ay + dv, ax + du)
                cost += diff * diff
        take = valid & (cost < best)
        best = np.where(take, cost, best)
        best_u = np.where(take, du, best_u)
        best_v = np.where(take, dv, best_v)
    return best_u, best_v


def unfold(x: np.ndarray, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """(N, H, W, C) -> (N, Ho, Wo, kh*kw, C) windows in raster order, zero padded."""
    if compiled is not None and x.dtype in (np.float32, np.float64):
        return compiled.unfold(np.ascontiguousarray(x), kh, kw, stride, pad)
    return numpy_unfold(x, kh, kw, stride, pad)


def fold(g: np.ndarray, h: int, w: int, kh: int, kw: int, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Adjoint of :func:`unfold`: scatter-add windows back to (N, H, W, C)."""
    if compiled is not None and g.dtype in (np.float32, np.float64):
        return compiled.fold(np.ascontiguousarray(g), h, w, kh, kw, stride, pad)
    return numpy_fold(g, h, w, kh, kw, stride, pad)


def match_candidates(a, b, init_u, init_v, offsets, half, max_disp):
    args = [np.ascontiguousarray(v, dtype=np.float64) for v in (a, b, init_u, init_v, offsets)]
    if compiled is not None:
        return compiled.match_candidates(*args, int(half), float(max_disp))
    return numpy_match_candidates(*args, int(half), float(max_disp))
