"""Probability vectors over the motion and intersection class sets."""

from __future__ import annotations

import numpy as np

MOTION_CLASSES = ("go straight", "turn right", "turn left")
INTERSECTION_CLASSES = (
    "go straight",
    "turn right",
    "turn left",
    "right facing T-junction",
    "left facing T-junction",
    "bottom facing T-junction",
    "crossroad",
)

# label swap under a horizontal mirror, zero-based
MOTION_MIRROR = (0, 2, 1)
INTERSECTION_MIRROR = (0, 2, 1, 4, 3, 5, 6)


class _PDV:
    names: tuple[str, ...] = ()

    def __init__(self, p, tol: float = 1e-6):
        p = np.asarray(p, dtype=np.float64).reshape(-1)
        if p.shape != (len(self.names),):
            raise ValueError(f"{type(self).__name__} needs {len(self.names)} entries, got {p.shape[0]}")
        if not np.all(np.isfinite(p)) or np.any(p < 0):
            raise ValueError(f"{type(self).__name__} entries must be finite and non-negative: {p}")
        if abs(p.sum() - 1.0) > tol:
            raise ValueError(f"{type(self).__name__} must sum to 1, sums to {p.sum():.9f}")
        self.p = p

    def argmax(self) -> int:
        return int(np.argmax(self.p))

    def __len__(self) -> int:
        return len(self.p)

    def __getitem__(self, i):
        return self.p[i]

    def __repr__(self) -> str:
        return f"{type(self).__name__}({np.array2string(self.p, precision=4)})"


class MotionPDV(_PDV):
    names = MOTION_CLASSES


class IntersectionPDV(_PDV):
    names = INTERSECTION_CLASSES
