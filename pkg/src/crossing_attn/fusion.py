"""Mask-based fusion of the motion PDV and the intersection PDV.

``I[c] = W_S[c] * P[c]`` where ``W_S`` is chosen by the least likely motion
class; when the most likely motion class reaches the confidence threshold the
mask ``T`` chosen by that class is applied as well.  The result is
renormalized; if every class is masked out the intersection PDV is returned
unchanged and the result is flagged as a fallback.

Renormalization is done in exact rational arithmetic, so each fused
probability is the correctly rounded value of ``I[c] / sum(I)``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from crossing_attn.pdv import MOTION_CLASSES, IntersectionPDV, MotionPDV

W_S_ROWS = (
    (0, 1, 1, 1, 1, 1, 1),
    (1, 0, 1, 1, 1, 1, 1),
    (1, 1, 0, 1, 1, 1, 1),
)
T_ROWS = (
    (1, 0, 0, 0, 1, 1, 1),
    (0, 1, 0, 1, 1, 0, 1),
    (0, 0, 1, 1, 0, 1, 1),
)
THRESHOLD = 0.9999


@dataclass(frozen=True)
class MaskTable:
    w_s: tuple[tuple[int, ...], ...] = W_S_ROWS
    t: tuple[tuple[int, ...], ...] = T_ROWS
    threshold: float = THRESHOLD

    def to_dict(self) -> dict:
        return {
            "W_S": {name: list(row) for name, row in zip(MOTION_CLASSES, self.w_s)},
            "T": {name: list(row) for name, row in zip(MOTION_CLASSES, self.t)},
            "threshold": self.threshold,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MaskTable":
        w_s = tuple(tuple(int(v) for v in d["W_S"][name]) for name in MOTION_CLASSES)
        t = tuple(tuple(int(v) for v in d["T"][name]) for name in MOTION_CLASSES)
        return cls(w_s=w_s, t=t, threshold=float(d["threshold"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "MaskTable":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class FusionResult:
    pdv: IntersectionPDV
    applied_t: bool
    c_minus: int
    c_plus: int
    fallback: bool
    mask: np.ndarray = field(repr=False, default=None)


def select_masks(motion: MotionPDV, table: MaskTable = MaskTable()):
    """(W_S row, T row or None, c_minus, c_plus); classes are zero-based, ties go to the lowest index."""
    p = motion.p
    c_minus = int(np.argmin(p))
    c_plus = int(np.argmax(p))
    t_row = np.asarray(table.t[c_plus], dtype=np.float64) if p[c_plus] >= table.threshold else None
    return np.asarray(table.w_s[c_minus], dtype=np.float64), t_row, c_minus, c_plus


def fuse(motion: MotionPDV, tpv, table: MaskTable = MaskTable()) -> FusionResult:
    """Apply the masks to ``tpv`` (an IntersectionPDV or any non-negative 7-vector)."""
    if not isinstance(motion, MotionPDV):
        motion = MotionPDV(motion)
    p = tpv.p if isinstance(tpv, IntersectionPDV) else np.asarray(tpv, dtype=np.float64)
    if p.shape != (7,) or not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"intersection scores must be 7 finite non-negative values, got {p}")
    if not np.any(p > 0):
        raise ValueError("intersection scores are all zero")
    w_s, t_row, c_minus, c_plus = select_masks(motion, table)
    mask = w_s if t_row is None else w_s * t_row
    fused = mask * p
    if not np.any(fused > 0):
        out = IntersectionPDV(p.copy()) if isinstance(tpv, IntersectionPDV) else IntersectionPDV(_normalize(p))
        return FusionResult(out, t_row is not None, c_minus, c_plus, True, mask)
    return FusionResult(IntersectionPDV(_normalize(fused)), t_row is not None, c_minus, c_plus, False, mask)


def _normalize(v: np.ndarray) -> np.ndarray:
    exact = [Fraction(float(x)) for x in v]
    total = sum(exact)
    return np.array([float(x / total) for x in exact])
