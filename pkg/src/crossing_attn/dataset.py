"""Synthetic scenes and ego-motion sequences, manifest ingestion, slicing and splitting."""

from __future__ import annotations

import csv
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from crossing_attn import render
from crossing_attn.imageio import read_pnm
from crossing_attn.pdv import INTERSECTION_MIRROR, MOTION_MIRROR

MANIFEST_HEADER = ("sequence_id", "frame_path", "distance_m", "motion_label", "intersection_label", "split")


class DataError(ValueError):
    """Bad or missing input data (maps to exit status 3 in the CLI)."""


# ---------------------------------------------------------------------------
# scenes


@dataclass(frozen=True)
class SceneParams:
    size: tuple[int, int] = (64, 64)
    road_width: tuple[float, float] = (6.0, 9.0)
    approach_band: tuple[float, float] = (-5.0, 0.0)
    cam_height: float = 5.0
    pitch_deg: float = 35.0
    hfov_deg: float = 100.0
    viewpoint_jitter: float = 1.0
    occluders: int = 2
    pixel_noise: float = 0.02
    palette_jitter: float = 1.0


@dataclass
class SceneSample:
    image: np.ndarray
    label: int
    seed: int
    params: SceneParams
    viewpoint: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 1 <= self.label <= 7:
            raise ValueError(f"scene label must be in 1..7, got {self.label}")


def mirror_class(label: int) -> int:
    """Intersection class seen in a horizontally mirrored image (1-based)."""
    return INTERSECTION_MIRROR[label - 1] + 1


def mirror_motion(label: int) -> int:
    return MOTION_MIRROR[label - 1] + 1


def _draw_occluders(img: np.ndarray, rng: np.random.Generator, count: int) -> None:
    h, w, _ = img.shape
    for _ in range(count):
        bw = int(rng.integers(w // 8, w // 3))
        bh = int(rng.integers(h // 10, h // 4))
        x0 = int(rng.integers(0, w - bw))
        y0 = int(rng.integers(h // 3, h - bh))
        shade = rng.random() * 0.25
        img[y0 : y0 + bh, x0 : x0 + bw] = shade + 0.05 * rng.random(3)


def generate_scene(label: int, seed: int, params: SceneParams = SceneParams()) -> SceneSample:
    """Render an approach view of an intersection of class ``label``.

    Classes 3 and 5 are rendered as the mirror images of classes 2 and 4 drawn
    from the same seed, which makes the left/right duality exact.
    """
    if not 1 <= label <= 7:
        raise ValueError(f"scene label must be in 1..7, got {label}")
    canonical = label if label not in (3, 5) else mirror_class(label)
    rng = np.random.default_rng([seed, 7])
    lo, hi = params.approach_band
    distance = float(rng.uniform(lo, hi))
    jit = params.viewpoint_jitter
    lateral = float(rng.uniform(-1.0, 1.0) * jit)
    yaw = float(rng.uniform(-8.0, 8.0) * jit)
    pitch = params.pitch_deg + float(rng.uniform(-3.0, 3.0) * jit)
    height = params.cam_height * float(1 + 0.1 * rng.uniform(-1, 1) * jit)
    width = float(rng.uniform(*params.road_width))
    noise = render.ValueNoise(rng)
    palette = render.random_palette(rng, params.palette_jitter)
    img = render.render_view(
        size=params.size,
        cam_pos=(lateral, height, distance),
        yaw_deg=yaw,
        pitch_deg=pitch,
        hfov_deg=params.hfov_deg,
        arms=render.CLASS_ARMS[canonical],
        road_width=width,
        noise=noise,
        palette=palette,
    )
    n_occ = int(rng.integers(0, params.occluders + 1)) if params.occluders else 0
    _draw_occluders(img, rng, n_occ)
    if params.pixel_noise:
        img = img + params.pixel_noise * rng.standard_normal(img.shape)
    img = np.clip(img, 0.0, 1.0)
    view = {"distance_m": distance, "lateral_m": lateral, "yaw_deg": yaw, "road_width_m": width}
    if canonical != label:
        img = img[:, ::-1].copy()
        view = {**view, "lateral_m": -lateral, "yaw_deg": -yaw}
    return SceneSample(image=img, label=label, seed=seed, params=params, viewpoint=view)


def scene_corpus(per_class: int, seed: int, params: SceneParams = SceneParams()) -> tuple[np.ndarray, np.ndarray]:
    """``per_class`` scenes of each class; images (N, H, W, 3), labels 1..7."""
    images, labels = [], []
    for label in range(1, 8):
        for i in range(per_class):
            s = generate_scene(label, seed * 1_000_003 + label * 10_007 + i, params)
            images.append(s.image)
            labels.append(label)
    return np.stack(images), np.asarray(labels)


# ---------------------------------------------------------------------------
# sequences


@dataclass(frozen=True)
class SequenceParams:
    size: tuple[int, int] = (48, 64)
    n_frames: int = 10
    speed: tuple[float, float] = (0.25, 0.4)
    yaw_per_meter_deg: tuple[float, float] = (8.0, 12.0)
    start_distance: tuple[float, float] = (-8.0, -4.0)
    cam_height: float = 1.6
    pitch_deg: float = 5.0
    hfov_deg: float = 90.0
    road_width: float = 7.0
    intersection_label: int = 7


@dataclass
class SequenceSample:
    frames: list[np.ndarray]
    pose_track: np.ndarray
    motion_label: int
    intersection_label: int
    sequence_id: str = ""

    def __post_init__(self):
        if len(self.frames) != len(self.pose_track):
            raise ValueError(f"{len(self.frames)} frames but {len(self.pose_track)} track entries")
        if not 1 <= self.motion_label <= 3:
            raise ValueError(f"motion label must be in 1..3, got {self.motion_label}")
        if not 1 <= self.intersection_label <= 7:
            raise ValueError(f"intersection label must be in 1..7, got {self.intersection_label}")

    def validate_track(self) -> None:
        if np.any(np.diff(self.pose_track) <= 0):
            raise DataError(f"sequence {self.sequence_id!r}: pose track is not strictly increasing")


def generate_sequence(motion: int, seed: int, params: SequenceParams = SequenceParams(),
                      speed: float | None = None) -> SequenceSample:
    """Drive through a textured scene: straight translation or a constant-curvature turn.

    Heading changes per metre travelled, so a zero speed yields identical frames.
    Turning right means positive yaw, which moves scene content leftwards.
    """
    if motion not in (1, 2, 3):
        raise ValueError(f"motion label must be in 1..3, got {motion}")
    rng = np.random.default_rng([seed, 11])
    step = float(rng.uniform(*params.speed)) if speed is None else float(speed)
    curvature = float(rng.uniform(*params.yaw_per_meter_deg))
    sign = {1: 0.0, 2: 1.0, 3: -1.0}[motion]
    start = float(rng.uniform(*params.start_distance))
    lateral = float(rng.uniform(-0.5, 0.5))
    pitch = params.pitch_deg + float(rng.uniform(-2, 2))
    noise = render.ValueNoise(rng)
    palette = render.random_palette(rng, 0.6)
    arms = render.CLASS_ARMS[params.intersection_label]
    x, z, heading = lateral, start, 0.0
    frames, track = [], []
    for t in range(params.n_frames):
        frames.append(render.render_view(
            size=params.size, cam_pos=(x, params.cam_height, z), yaw_deg=heading, pitch_deg=pitch,
            hfov_deg=params.hfov_deg, arms=arms, road_width=params.road_width, noise=noise,
            palette=palette, fog_distance=60.0,
        ))
        track.append(start + t * step)
        h = np.radians(heading)
        x += step * np.sin(h)
        z += step * np.cos(h)
        heading += sign * curvature * step
    return SequenceSample(frames=frames, pose_track=np.asarray(track), motion_label=motion,
                          intersection_label=params.intersection_label, sequence_id=f"synth-{motion}-{seed}")


def mirror_sequence(seq: SequenceSample) -> SequenceSample:
    return SequenceSample(
        frames=[f[:, ::-1].copy() for f in seq.frames],
        pose_track=seq.pose_track.copy(),
        motion_label=mirror_motion(seq.motion_label),
        intersection_label=mirror_class(seq.intersection_label),
        sequence_id=seq.sequence_id + "-mirror",
    )


# ---------------------------------------------------------------------------
# approach window


@dataclass
class ApproachSlice:
    indices: list[int]
    distances: np.ndarray
    frames: list
    empty: bool


def slice_approach(seq: SequenceSample, L1: float = 0.0, L2: float = 5.0) -> ApproachSlice:
    """Frames whose along-track distance d satisfies -L2 <= d <= -L1."""
    if not (L2 > L1 >= 0):
        raise ValueError(f"need L2 > L1 >= 0, got L1={L1}, L2={L2}")
    d = np.asarray(seq.pose_track, dtype=np.float64)
    idx = [int(i) for i in np.flatnonzero((d >= -L2) & (d <= -L1))]
    return ApproachSlice(indices=idx, distances=d[idx], frames=[seq.frames[i] for i in idx], empty=not idx)


# ---------------------------------------------------------------------------
# splitting


@dataclass(frozen=True)
class Record:
    label: int
    time: float
    key: object = None


@dataclass
class Split:
    train: list
    test: list
    excluded: list

    def __iter__(self) -> Iterator[list]:
        yield self.train
        yield self.test


def time_clusters(samples: Sequence, max_gap: float = 1.0) -> list[list]:
    """Group samples of each label into runs whose consecutive time gaps are <= ``max_gap``."""
    clusters = []
    by_label: dict[int, list] = {}
    for s in samples:
        by_label.setdefault(s.label, []).append(s)
    for label in sorted(by_label):
        run: list = []
        for s in sorted(by_label[label], key=lambda r: r.time):
            if run and s.time - run[-1].time > max_gap:
                clusters.append(run)
                run = []
            run.append(s)
        if run:
            clusters.append(run)
    return clusters


def _apportion(total: int, weights: Sequence[int]) -> list[int]:
    """Largest-remainder allocation of ``total`` in proportion to ``weights``."""
    wsum = sum(weights)
    exact = [total * w / wsum for w in weights]
    base = [int(np.floor(e)) for e in exact]
    rem = total - sum(base)
    order = sorted(range(len(weights)), key=lambda i: (-(exact[i] - base[i]), i))
    for i in order[:rem]:
        base[i] += 1
    return base


def split_and_filter(samples: Sequence, split_ratio: tuple[float, float] = (126, 36), min_cluster: int = 5,
                     seed: int = 0, max_gap: float = 1.0) -> Split:
    """Drop time clusters smaller than ``min_cluster``, then a seeded, class-stratified split.

    The train count is ``round(N * r_train / (r_train + r_test))`` over the retained
    samples and is apportioned to classes by largest remainder.
    """
    kept, excluded = [], []
    for cl in time_clusters(samples, max_gap):
        (kept if len(cl) >= min_cluster else excluded).extend(cl)
    r_train, r_test = split_ratio
    n_train = int(round(len(kept) * r_train / (r_train + r_test)))
    labels = sorted({s.label for s in samples})
    groups = {lab: [s for s in kept if s.label == lab] for lab in labels}
    alloc = _apportion(n_train, [len(groups[lab]) for lab in labels])
    rng = np.random.default_rng(seed)
    train, test = [], []
    for lab, n_lab in zip(labels, alloc):
        g = groups[lab]
        if n_lab == 0:
            raise DataError(f"class {lab} has no training samples after filtering")
        order = rng.permutation(len(g))
        train.extend(g[i] for i in order[:n_lab])
        test.extend(g[i] for i in order[n_lab:])
    return Split(train=train, test=test, excluded=excluded)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class ManifestEntry:
    sequence_id: str
    frame_paths: list[Path]
    distances: np.ndarray
    motion_label: int
    intersection_label: int
    split: str

    def load(self) -> SequenceSample:
        frames = [read_pnm(p) for p in self.frame_paths]
        return SequenceSample(frames=frames, pose_track=self.distances.copy(), motion_label=self.motion_label,
                              intersection_label=self.intersection_label, sequence_id=self.sequence_id)


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Parse the CSV manifest; frame paths are resolved relative to the manifest."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    base = path.parent
    rows: dict[str, list[dict]] = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path}: header must be {','.join(MANIFEST_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            rows.setdefault(row[0], []).append(dict(zip(MANIFEST_HEADER, row), lineno=lineno))
    entries = []
    for sid, group in rows.items():
        frames = [base / r["frame_path"] for r in group]
        for f, r in zip(frames, group):
            if not f.exists():
                raise DataError(f"{path}:{r['lineno']}: frame not found: {f}")
        try:
            dist = np.array([float(r["distance_m"]) for r in group])
            motion = {int(r["motion_label"]) for r in group}
            inter = {int(r["intersection_label"]) for r in group}
        except ValueError as exc:
            raise DataError(f"{path}: sequence {sid!r}: {exc}") from exc
        splits = {r["split"] for r in group}
        if len(motion) != 1 or len(inter) != 1 or len(splits) != 1:
            raise DataError(f"{path}: sequence {sid!r} mixes labels or splits across frames")
        if np.any(np.diff(dist) <= 0):
            raise DataError(f"{path}: sequence {sid!r}: distances are not strictly increasing")
        (m,), (c,), (sp,) = motion, inter, splits
        if not 1 <= m <= 3 or not 1 <= c <= 7:
            raise DataError(f"{path}: sequence {sid!r}: labels out of range ({m}, {c})")
        entries.append(ManifestEntry(sid, frames, dist, m, c, sp))
    return entries


def write_manifest(path: str | os.PathLike, entries: Sequence[ManifestEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_HEADER)
        for e in entries:
            for fp, d in zip(e.frame_paths, e.distances):
                rel = os.path.relpath(fp, path.parent)
                w.writerow([e.sequence_id, rel, repr(float(d)), e.motion_label, e.intersection_label, e.split])


def params_to_dict(p) -> dict:
    return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(p).items()}


def params_from_dict(cls, d: dict):
    base = cls()
    unknown = set(d) - set(asdict(base))
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    conv = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return replace(base, **conv)
