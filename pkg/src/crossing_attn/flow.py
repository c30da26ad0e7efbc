"""Dense optical flow by coarse-to-fine block matching, and its colour coding.

At the coarsest pyramid level an exhaustive integer search covers the search
radius; every finer level doubles the estimate and re-searches a 3x3
neighbourhood after a 3x3 median of the coarser field; the finest level finishes with a 3x3 search at half-pixel
steps (bilinear sampling).  Candidates are scanned nearest-first and replaced
only on strictly lower cost, so flat regions keep the smaller displacement.
"""

from __future__ import annotations

import math
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from crossing_attn import kernels

FLO_MAGIC = b"FLO1"


@dataclass(frozen=True)
class FlowParams:
    levels: int = 2
    block: int = 5
    search_radius: int = 4


def _offsets(radius: int, step: float = 1.0) -> np.ndarray:
    r = range(-radius, radius + 1)
    offs = sorted(((dx, dy) for dy in r for dx in r), key=lambda o: (o[0] ** 2 + o[1] ** 2, o[1], o[0]))
    return np.asarray(offs, dtype=np.float64) * step


def _downsample(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    if h % 2 or w % 2:
        img = np.pad(img, ((0, h % 2), (0, w % 2)), mode="edge")
    h, w = img.shape
    return img.reshape(h // 2, 2, w // 2, 2).mean(axis=(1, 3))


def median3x3(field: np.ndarray) -> np.ndarray:
    """3x3 median with edge replication; removes isolated coarse-level mismatches."""
    h, w = field.shape
    p = np.pad(field, 1, mode="edge")
    return np.median(np.stack([p[dy : dy + h, dx : dx + w] for dy in range(3) for dx in range(3)]), axis=0)


def pyramid(img: np.ndarray, levels: int) -> list[np.ndarray]:
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(_downsample(pyr[-1]))
    return pyr


def compute_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams = FlowParams()) -> np.ndarray:
    """(H, W, 2) field of (u, v) such that ``frame_b[y + v, x + u] ~ frame_a[y, x]``."""
    a = np.asarray(frame_a, dtype=np.float64)
    b = np.asarray(frame_b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"frames differ in size: {a.shape} vs {b.shape}")
    if a.ndim != 2:
        raise ValueError(f"frames must be grayscale (H, W), got {a.shape}")
    if params.block < 1 or params.block % 2 == 0:
        raise ValueError("block size must be odd")
    levels = max(1, min(params.levels, int(math.log2(max(1, min(a.shape)))) + 1))
    pa, pb = pyramid(a, levels), pyramid(b, levels)
    half = params.block // 2
    radius = float(params.search_radius)
    u = v = None
    for lvl in range(levels - 1, -1, -1):
        la, lb = pa[lvl], pb[lvl]
        h, w = la.shape
        max_disp = radius / 2**lvl
        if u is None:
            u = np.zeros((h, w))
            v = np.zeros((h, w))
            offs = _offsets(int(math.ceil(max_disp)))
        else:
            u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)[:h, :w] * 2
            v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)[:h, :w] * 2
            offs = _offsets(1)
        u = np.clip(u, -max_disp, max_disp)
        v = np.clip(v, -max_disp, max_disp)
        u, v = kernels.match_candidates(la, lb, u, v, offs, half, max_disp)
        if lvl > 0:
            u, v = median3x3(u), median3x3(v)
    u, v = kernels.match_candidates(pa[0], pb[0], u, v, _offsets(1, 0.5), half, radius)
    return np.stack([u, v], axis=-1)


def compute_flows(frames: Sequence[np.ndarray], params: FlowParams = FlowParams(), workers: int | None = None) -> list[np.ndarray]:
    """Flow for each consecutive pair; pairs are independent and may run on a thread pool."""
    if workers is None:
        workers = thread_cap()
    pairs = list(zip(frames[:-1], frames[1:]))
    if workers <= 1 or len(pairs) < 2:
        return [compute_flow(a, b, params) for a, b in pairs]
    with ThreadPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(lambda ab: compute_flow(ab[0], ab[1], params), pairs))


def thread_cap() -> int:
    try:
        return max(1, int(os.environ.get("CROSSING_ATTN_THREADS", "1")))
    except ValueError:
        return 1


def hsv_to_rgb(h: np.ndarray, s: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Six-segment hexcone: red -> yellow -> green -> cyan -> blue -> magenta."""
    h6 = (h % 1.0) * 6.0
    i = np.floor(h6).astype(int) % 6
    f = h6 - np.floor(h6)
    p = v * (1 - s)
    q = v * (1 - s * f)
    t = v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros(h.shape + (3,))
    for seg, (r, g, b) in enumerate(table):
        m = i == seg
        out[m, 0] = r[m]
        out[m, 1] = g[m]
        out[m, 2] = b[m]
    return out


def flow_to_color(flow: np.ndarray) -> np.ndarray:
    """Hue from direction atan2(v, u), saturation from magnitude / per-image max, value 1.

    Zero motion is white; opposite directions sit 180 degrees apart on the wheel.
    """
    flow = np.asarray(flow, dtype=np.float64)
    u, v = flow[..., 0], flow[..., 1]
    mag = np.hypot(u, v)
    peak = mag.max() if mag.size else 0.0
    sat = mag / peak if peak > 0 else np.zeros_like(mag)
    hue = (np.arctan2(v, u) / (2 * np.pi)) % 1.0
    return hsv_to_rgb(hue, sat, np.ones_like(mag))


def write_flo(path: str | os.PathLike, flow: np.ndarray) -> None:
    flow = np.asarray(flow)
    h, w, c = flow.shape
    if c != 2:
        raise ValueError(f"flow must be (H, W, 2), got {flow.shape}")
    Path(path).write_bytes(FLO_MAGIC + struct.pack("<III", h, w, 0) + flow.astype("<f4").tobytes())


def read_flo(path: str | os.PathLike) -> np.ndarray:
    buf = Path(path).read_bytes()
    if buf[:4] != FLO_MAGIC:
        raise ValueError(f"{path}: bad flow magic {buf[:4]!r}")
    h, w, _ = struct.unpack_from("<III", buf, 4)
    return np.frombuffer(buf, dtype="<f4", count=h * w * 2, offset=16).reshape(h, w, 2).astype(np.float64)
