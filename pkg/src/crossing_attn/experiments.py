"""Shared experiment plumbing for the CLI and the acceptance runs."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from crossing_attn import dataset as D
from crossing_attn.fpv import FNet, code_flows, encode_sequence, mirror_flows, sequence_flows
from crossing_attn.fusion import MaskTable, fuse
from crossing_attn.imageio import read_pnm, resize_bilinear
from crossing_attn.metrics import confusion_matrix
from crossing_attn.pdv import MotionPDV

SCENE_INDEX = "scenes.csv"
SCENE_INDEX_HEADER = ("path", "label", "split")


@dataclass
class SceneSplit:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def synthetic_scenes(per_class: int, test_per_class: int, seed: int, params: D.SceneParams) -> SceneSplit:
    """Train and test corpora drawn from disjoint seed streams."""
    if per_class:
        xtr, ytr = D.scene_corpus(per_class, seed=2 * seed + 1, params=params)
    else:
        xtr, ytr = np.zeros((0,) + tuple(params.size) + (3,)), np.zeros(0, dtype=np.int64)
    xte, yte = D.scene_corpus(test_per_class, seed=2 * seed + 2, params=params)
    return SceneSplit(xtr, ytr, xte, yte)


def read_scene_dir(root: str | Path, size: tuple[int, int]) -> SceneSplit:
    """Load a directory written by ``synth-gen`` (or any tree with a scenes.csv index)."""
    root = Path(root)
    index = root / SCENE_INDEX
    if not index.exists():
        raise D.DataError(f"scene index not found: {index}")
    parts = {"train": ([], []), "test": ([], [])}
    with open(index, newline="") as fh:
        reader = csv.reader(fh)
        if tuple(next(reader, ())) != SCENE_INDEX_HEADER:
            raise D.DataError(f"{index}: header must be {','.join(SCENE_INDEX_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 3 or row[2] not in parts:
                raise D.DataError(f"{index}:{lineno}: malformed row {row}")
            path = root / row[0]
            if not path.exists():
                raise D.DataError(f"{index}:{lineno}: image not found: {path}")
            img = read_pnm(path)
            if img.ndim == 2:
                img = np.repeat(img[..., None], 3, axis=-1)
            if img.shape[:2] != tuple(size):
                img = resize_bilinear(img, size)
            parts[row[2]][0].append(img)
            parts[row[2]][1].append(int(row[1]))
    for name, (imgs, _) in parts.items():
        if not imgs:
            raise D.DataError(f"{index}: no {name} images")
    return SceneSplit(np.stack(parts["train"][0]), np.asarray(parts["train"][1]),
                      np.stack(parts["test"][0]), np.asarray(parts["test"][1]))


# ---------------------------------------------------------------------------
# ego-motion sequences


@dataclass
class MotionSet:
    coded: np.ndarray          # (N, S, H, W, 3)
    coded_mirror: np.ndarray   # coded input of the mirrored sequences
    labels: np.ndarray         # 1..3


def encode_motion_set(samples, model_config) -> MotionSet:
    coded, mirrored, labels = [], [], []
    for seq in samples:
        if model_config.use_flow:
            flows = sequence_flows(seq.frames, model_config)
            coded.append(code_flows(flows))
            mirrored.append(code_flows(mirror_flows(flows)))
        else:
            coded.append(encode_sequence(seq.frames, model_config))
            mirrored.append(encode_sequence([f[:, ::-1] for f in seq.frames], model_config))
        labels.append(seq.motion_label)
    return MotionSet(np.stack(coded), np.stack(mirrored), np.asarray(labels))


def synthetic_sequences(per_class: int, seed: int, params: D.SequenceParams, stream: int) -> list:
    out = []
    for motion in (1, 2, 3):
        for i in range(per_class):
            out.append(D.generate_sequence(motion, seed * 1_000_003 + stream * 100_003 + motion * 10_007 + i, params))
    return out


def manifest_sequences(path, frame_size, L1: float, L2: float):
    """(train, test) sequence lists from a manifest, sliced to the approach window and resized."""
    train, test = [], []
    for entry in D.read_manifest(path):
        seq = entry.load()
        cut = D.slice_approach(seq, L1, L2)
        if len(cut.frames) < 2:
            raise D.DataError(f"sequence {entry.sequence_id!r}: fewer than 2 frames in the approach window")
        frames = [resize_bilinear(f if f.ndim == 3 else np.repeat(f[..., None], 3, -1), frame_size) for f in cut.frames]
        sample = D.SequenceSample(frames, cut.distances, seq.motion_label, seq.intersection_label, entry.sequence_id)
        (train if entry.split == "train" else test).append(sample)
    if not train or not test:
        raise D.DataError(f"{path}: manifest needs both train and test sequences")
    return train, test


def mirror_consistency(model: FNet, data: MotionSet) -> float:
    """Fraction of sequences whose mirrored prediction is the mirrored label of the original prediction."""
    a = model.predict_proba(data.coded).argmax(axis=1)
    b = model.predict_proba(data.coded_mirror).argmax(axis=1)
    swap = np.array([0, 2, 1])
    return float(np.mean(swap[a] == b))


# ---------------------------------------------------------------------------
# fusion experiments


def allowed_motions(label: int, table: MaskTable = MaskTable()) -> list[int]:
    """Ego motions (1-based) whose T row keeps intersection class ``label``."""
    return [m + 1 for m in range(3) if table.t[m][label - 1]]


def calibrated_motion_pdv(motion: int, accuracy: float, rng: np.random.Generator,
                          confident_rate: float = 0.5) -> MotionPDV:
    """Synthetic FPV output that ranks the true motion first with probability ``accuracy``.

    A correct output is confident (top probability at least 0.9999) with
    probability ``confident_rate``.  A wrong output ranks the true motion second
    and stays below the confidence threshold.
    """
    true = motion - 1
    others = [c for c in range(3) if c != true]
    p = np.zeros(3)
    if rng.random() < accuracy:
        top = 1.0 - rng.uniform(0.0, 1e-4) if rng.random() < confident_rate else rng.uniform(0.5, 0.99)
        split = rng.uniform(0.0, 1.0)
        p[true] = top
        p[others[0]], p[others[1]] = (1 - top) * split, (1 - top) * (1 - split)
    else:
        wrong, third = (others if rng.random() < 0.5 else others[::-1])
        top = rng.uniform(0.45, 0.9)
        second = rng.uniform(0.55, 0.95) * (1 - top)
        second = min(second, top * 0.999)
        p[wrong], p[true], p[third] = top, second, 1 - top - second
        if p[third] >= p[true]:
            p[true], p[third] = p[third], p[true]
    return MotionPDV(p / p.sum())


def simulate_motions(labels, accuracy: float, seed: int, table: MaskTable = MaskTable()):
    """Draw one T-consistent ego motion per intersection label and a calibrated FPV output for it."""
    rng = np.random.default_rng([seed, 31])
    motions, pdvs = [], []
    for lab in labels:
        m = int(rng.choice(allowed_motions(int(lab), table)))
        motions.append(m)
        pdvs.append(calibrated_motion_pdv(m, accuracy, rng))
    return np.asarray(motions), pdvs


@dataclass
class FusionOutcome:
    fused: np.ndarray           # (N, 7)
    tpv_confusion: np.ndarray
    fused_confusion: np.ndarray
    applied_t: int
    fallbacks: int

    @staticmethod
    def lr_confusions(conf: np.ndarray) -> int:
        """Turn-right / turn-left confusions in either direction."""
        return int(conf[1, 2] + conf[2, 1])


def fuse_all(tpv: np.ndarray, motion_pdvs, labels, table: MaskTable = MaskTable()) -> FusionOutcome:
    results = [fuse(m, p, table) for m, p in zip(motion_pdvs, tpv)]
    fused = np.stack([r.pdv.p for r in results])
    return FusionOutcome(
        fused=fused,
        tpv_confusion=confusion_matrix(labels, tpv.argmax(1) + 1, 7),
        fused_confusion=confusion_matrix(labels, fused.argmax(1) + 1, 7),
        applied_t=sum(r.applied_t for r in results),
        fallbacks=sum(r.fallback for r in results),
    )
