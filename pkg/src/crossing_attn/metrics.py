"""Top-1 evaluation, confusion matrices and report export."""

from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from crossing_attn.imageio import write_pnm

REPORT_FILES = ("report.json", "confusion.csv", "confusion.ppm")


class ReportExistsError(FileExistsError):
    """The output directory already holds a report."""


@dataclass
class EvalReport:
    top1: float
    confusion: list[list[int]]
    per_class_recall: list[float | None]
    n_samples: int
    config_digest: str
    seed: int
    command: str = ""
    extra: dict = field(default_factory=dict)

    def check(self) -> None:
        c = np.asarray(self.confusion)
        if c.sum() != self.n_samples:
            raise ValueError(f"confusion sums to {c.sum()}, report claims {self.n_samples} samples")
        if self.n_samples and abs(self.top1 - np.trace(c) / c.sum()) > 1e-12:
            raise ValueError("top1 disagrees with the confusion trace")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))


def confusion_matrix(labels: Sequence[int], predictions: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are ground truth, columns predictions; classes are 1-based."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    if labels.shape != predictions.shape:
        raise ValueError(f"{labels.shape[0]} labels vs {predictions.shape[0]} predictions")
    for name, v in (("label", labels), ("prediction", predictions)):
        if v.size and (v.min() < 1 or v.max() > num_classes):
            raise ValueError(f"{name}s must lie in 1..{num_classes}")
    c = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(c, (labels - 1, predictions - 1), 1)
    return c


def evaluate(pdvs: np.ndarray, labels: Sequence[int], *, config_digest: str = "", seed: int = 0,
             command: str = "", extra: dict | None = None) -> EvalReport:
    """Score (N, K) probability rows against 1-based labels; prediction = argmax (lowest index on ties)."""
    pdvs = np.asarray(pdvs, dtype=np.float64)
    if pdvs.ndim != 2 or len(pdvs) == 0:
        raise ValueError(f"need a non-empty (N, K) array of PDVs, got shape {pdvs.shape}")
    k = pdvs.shape[1]
    preds = pdvs.argmax(axis=1) + 1
    conf = confusion_matrix(labels, preds, k)
    rows = conf.sum(axis=1)
    recall = [float(conf[i, i] / rows[i]) if rows[i] else None for i in range(k)]
    report = EvalReport(
        top1=float(np.trace(conf) / conf.sum()),
        confusion=conf.tolist(),
        per_class_recall=recall,
        n_samples=int(conf.sum()),
        config_digest=config_digest,
        seed=int(seed),
        command=command,
        extra=dict(extra or {}),
    )
    report.check()
    return report


def heatmap(confusion: np.ndarray, cell: int = 8) -> np.ndarray:
    """Row-normalized grayscale image, one ``cell``-pixel square per entry; empty rows stay black."""
    c = np.asarray(confusion, dtype=np.float64)
    rows = c.sum(axis=1, keepdims=True)
    norm = np.divide(c, rows, out=np.zeros_like(c), where=rows > 0)
    return np.kron(norm, np.ones((cell, cell)))


def confusion_csv(confusion) -> str:
    return "".join(",".join(str(int(v)) for v in row) + "\n" for row in confusion)


def export_report(report: EvalReport, directory: str | os.PathLike) -> list[Path]:
    """Write report.json, confusion.csv and confusion.ppm.

    Refuses to overwrite an existing report.  Everything is written to
    temporary names first and renamed only once all three files exist.
    """
    report.check()
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    targets = [d / name for name in REPORT_FILES]
    present = [str(t) for t in targets if t.exists()]
    if present:
        raise ReportExistsError(f"report files already exist: {', '.join(present)}")
    temps = [d / f".{name}.tmp" for name in REPORT_FILES]
    try:
        temps[0].write_text(report.to_json())
        temps[1].write_text(confusion_csv(report.confusion))
        write_pnm(temps[2], heatmap(report.confusion))
        for tmp, dst in zip(temps, targets):
            os.replace(tmp, dst)
    except BaseException:
        for p in temps:
            p.unlink(missing_ok=True)
        raise
    return targets
