"""Binary PGM/PPM reading and writing, plus a small bilinear resize."""

from __future__ import annotations

import os
from pathlib import Path

import numpy as np

LUMA = np.array([0.299, 0.587, 0.114])


class ImageFormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int, pos: int) -> tuple[list[bytes], int]:
    out = []
    n = len(buf)
    while len(out) < count:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ImageFormatError("truncated header")
        out.append(buf[start:pos])
    return out, pos + 1


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    """Read P5/P6 into float64 in [0, 1]; (H, W) for PGM, (H, W, 3) for PPM."""
    buf = Path(path).read_bytes()
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ImageFormatError(f"{path}: unsupported magic {magic!r}")
    (w, h, maxval), pos = _tokens(buf, 3, 2)
    w, h, maxval = int(w), int(h), int(maxval)
    chans = 3 if magic == b"P6" else 1
    dtype = ">u2" if maxval > 255 else "u1"
    count = w * h * chans
    data = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    img = data.reshape((h, w, chans) if chans == 3 else (h, w)).astype(np.float64) / maxval
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    return img if img.ndim == 2 else img @ LUMA


def read_gray(path: str | os.PathLike) -> np.ndarray:
    return to_gray(read_pnm(path))


def write_pnm(path: str | os.PathLike, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim == 2:
        magic = b"P5"
    elif img.ndim == 3 and img.shape[2] == 3:
        magic = b"P6"
    else:
        raise ImageFormatError(f"cannot write image of shape {img.shape}")
    h, w = img.shape[:2]
    q = np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255), 0, 255).astype(np.uint8)
    Path(path).write_bytes(magic + f"\n{w} {h}\n255\n".encode() + q.tobytes())


def resize_bilinear(img: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Resize (H, W[, C]) to ``size`` = (height, width) with pixel-centre alignment."""
    h, w = img.shape[:2]
    oh, ow = size
    if (h, w) == (oh, ow):
        return img.copy()
    ys = np.clip((np.arange(oh) + 0.5) * h / oh - 0.5, 0, h - 1)
    xs = np.clip((np.arange(ow) + 0.5) * w / ow - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    if img.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    top = img[y0][:, x0] * (1 - fx) + img[y0][:, x1] * fx
    bot = img[y1][:, x0] * (1 - fx) + img[y1][:, x1] * fx
    return top * (1 - fy) + bot * fy
