"""First-person-view ego-motion classifier (F-Net).

frames -> pairwise flow -> colour coding -> small conv extractor per frame
-> LSTM over time -> linear + softmax on the final hidden state.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from crossing_attn import tensor as T
from crossing_attn.flow import FlowParams, compute_flows, flow_to_color
from crossing_attn.imageio import to_gray
from crossing_attn.layers import Conv2d, Linear, Module, he_init
from crossing_attn.optim import SGD
from crossing_attn.pdv import MotionPDV
from crossing_attn.tensor import NumericError, ShapeError, Tensor

log = logging.getLogger(__name__)


@dataclass
class RecurrentState:
    h: Tensor
    c: Tensor

    @classmethod
    def zeros(cls, batch: int, width: int, dtype=np.float64) -> "RecurrentState":
        return cls(Tensor(np.zeros((batch, width), dtype=dtype)), Tensor(np.zeros((batch, width), dtype=dtype)))


class LSTMCell(Module):
    """Gates packed as [input, forget, candidate, output] along the last axis."""

    def __init__(self, n_in: int, width: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.n_in, self.width = n_in, width
        self.w_x = self.param("w_x", he_init(rng, n_in, (n_in, 4 * width), dtype) * 0.5)
        self.w_h = self.param("w_h", he_init(rng, width, (width, 4 * width), dtype) * 0.5)
        bias = np.zeros(4 * width, dtype=dtype)
        bias[width : 2 * width] = 1.0
        self.bias = self.param("bias", bias)

    def __call__(self, x: Tensor, state: RecurrentState) -> RecurrentState:
        return recurrent_step(x, state, self)


def recurrent_step(x_t: Tensor, state: RecurrentState, weights: LSTMCell) -> RecurrentState:
    """One gated step: c' = f*c + i*g, h' = o*tanh(c')."""
    n = weights.width
    if x_t.shape[-1] != weights.n_in or state.h.shape[-1] != n or state.c.shape != state.h.shape:
        raise ShapeError(f"recurrent step: input {x_t.shape}, state {state.h.shape}/{state.c.shape}, width {n}")
    z = T.add(T.linear(x_t, weights.w_x, weights.bias), T.linear(state.h, weights.w_h))
    i = T.sigmoid(T.slice_axis(z, -1, 0, n))
    f = T.sigmoid(T.slice_axis(z, -1, n, 2 * n))
    g = T.tanh(T.slice_axis(z, -1, 2 * n, 3 * n))
    o = T.sigmoid(T.slice_axis(z, -1, 3 * n, 4 * n))
    c = T.add(T.hadamard(f, state.c), T.hadamard(i, g))
    h = T.hadamard(o, T.tanh(c))
    return RecurrentState(h, c)


CONFIG_KEYS = ("frame_size", "conv_channels", "feature_width", "recurrent_width", "flow", "use_flow", "seed")


@dataclass(frozen=True)
class FNetConfig:
    frame_size: tuple[int, int] = (48, 64)
    conv_channels: tuple[int, ...] = (8, 16, 16)
    feature_width: int = 64
    recurrent_width: int = 32
    flow: FlowParams = FlowParams()
    use_flow: bool = True
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "frame_size", tuple(int(v) for v in self.frame_size))
        object.__setattr__(self, "conv_channels", tuple(int(v) for v in self.conv_channels))
        if isinstance(self.flow, dict):
            object.__setattr__(self, "flow", FlowParams(**self.flow))
        scale = 2 ** len(self.conv_channels)
        if any(s % scale for s in self.frame_size):
            raise ValueError(f"frame_size {self.frame_size} must be divisible by {scale}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["frame_size"] = list(self.frame_size)
        d["conv_channels"] = list(self.conv_channels)
        return {k: d[k] for k in CONFIG_KEYS}

    @classmethod
    def from_dict(cls, d: dict) -> "FNetConfig":
        unknown = set(d) - set(CONFIG_KEYS)
        if unknown:
            raise ValueError(f"unknown F-Net config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "FNetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


class FNet(Module):
    def __init__(self, config: FNetConfig = FNetConfig(), dtype=np.float64):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.convs = []
        c_prev = 3
        for i, c in enumerate(config.conv_channels):
            self.convs.append(self.child(f"conv{i}", Conv2d(c_prev, c, 3, rng, dtype, stride=2, pad=1)))
            c_prev = c
        h, w = config.frame_size
        scale = 2 ** len(config.conv_channels)
        self.flat = (h // scale) * (w // scale) * c_prev
        self.proj = self.child("proj", Linear(self.flat, config.feature_width, rng, dtype))
        self.lstm = self.child("lstm", LSTMCell(config.feature_width, config.recurrent_width, rng, dtype))
        self.head = self.child("head", Linear(config.recurrent_width, 3, rng, dtype))

    @property
    def dtype(self):
        return self.proj.weight.dtype

    def features(self, images: Tensor) -> Tensor:
        """(N, H, W, 3) -> (N, feature_width)."""
        x = images
        for conv in self.convs:
            x = T.relu(conv(x))
        return T.relu(self.proj(T.reshape(x, (x.shape[0], self.flat))))

    def logits(self, seq: Tensor) -> Tensor:
        """(B, S, H, W, 3) coded frames -> (B, 3)."""
        if seq.ndim != 5 or seq.shape[2:] != tuple(self.config.frame_size) + (3,):
            raise ShapeError(f"F-Net expects (B, S, {self.config.frame_size[0]}, {self.config.frame_size[1]}, 3), got {seq.shape}")
        b, s = seq.shape[:2]
        feats = self.features(T.reshape(seq, (b * s,) + seq.shape[2:]))
        feats = T.reshape(feats, (b, s, self.config.feature_width))
        state = RecurrentState.zeros(b, self.config.recurrent_width, self.dtype)
        for t in range(s):
            x_t = T.reshape(T.slice_axis(feats, 1, t, t + 1), (b, self.config.feature_width))
            state = self.lstm(x_t, state)
        return self.head(state.h)

    def predict_proba(self, coded: np.ndarray, batch_size: int = 32) -> np.ndarray:
        out = []
        with T.no_grad():
            for i in range(0, len(coded), batch_size):
                batch = Tensor(np.asarray(coded[i : i + batch_size], dtype=self.dtype))
                out.append(T.softmax(self.logits(batch)).data.astype(np.float64))
        return np.concatenate(out, axis=0)


def sequence_flows(frames: Sequence[np.ndarray], config: FNetConfig) -> np.ndarray:
    """(S, H, W, 2) flow between consecutive grayscale frames."""
    if len(frames) < 2:
        raise ValueError(f"need at least 2 frames, got {len(frames)}")
    gray = [to_gray(np.asarray(f, dtype=np.float64)) for f in frames]
    for g in gray:
        if g.shape != tuple(config.frame_size):
            raise ShapeError(f"frame size {g.shape} does not match configured {config.frame_size}")
    return np.stack(compute_flows(gray, config.flow))


def mirror_flows(flows: np.ndarray) -> np.ndarray:
    """Flow of the horizontally mirrored frames: flip columns and negate u."""
    out = flows[..., ::-1, :].copy()
    out[..., 0] *= -1
    return out


def code_flows(flows: np.ndarray) -> np.ndarray:
    return np.stack([flow_to_color(f) for f in flows])


def encode_sequence(frames: Sequence[np.ndarray], config: FNetConfig) -> np.ndarray:
    """Frames -> (S, H, W, 3) network input: colour-coded flow (or raw frames for the ablation)."""
    if not config.use_flow:
        if len(frames) < 2:
            raise ValueError(f"need at least 2 frames, got {len(frames)}")
        return np.stack([np.repeat(to_gray(np.asarray(f, dtype=np.float64))[..., None], 3, axis=-1) for f in frames[1:]])
    return code_flows(sequence_flows(frames, config))


def sequence_classify(frames: Sequence[np.ndarray], model: FNet) -> MotionPDV:
    if len(frames) < 2:
        raise ValueError(f"sequence_classify needs at least 2 frames, got {len(frames)}")
    coded = encode_sequence(frames, model.config)
    return MotionPDV(model.predict_proba(coded[None])[0])


@dataclass
class FNetTrainParams:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mirror_augment: bool = True
    seed: int = 0


def train_fnet(model: FNet, coded: np.ndarray, labels: np.ndarray, params: FNetTrainParams,
               coded_mirror: np.ndarray | None = None, callback=None):
    """``coded`` is (N, S, H, W, 3); ``labels`` are 1..3.

    Mirror augmentation needs ``coded_mirror``, the coded input of the
    mirrored sequences (see :func:`mirror_flows`).
    """
    from crossing_attn.pdv import MOTION_MIRROR

    labels = np.asarray(labels)
    if len(coded) == 0:
        raise ValueError("empty training split")
    if labels.min() < 1 or labels.max() > 3:
        raise ValueError("motion labels must be in 1..3")
    rng = np.random.default_rng(params.seed)
    opt = SGD(model.parameters(), lr=params.lr, momentum=params.momentum, weight_decay=params.weight_decay)
    if params.mirror_augment and coded_mirror is None:
        raise ValueError("mirror augmentation requires coded_mirror")
    mirrored = coded_mirror
    mirror = np.asarray(MOTION_MIRROR)
    history = []
    for epoch in range(params.epochs):
        opt.lr = 0.5 * params.lr * (1 + np.cos(np.pi * epoch / params.epochs))
        order = rng.permutation(len(coded))
        flips = rng.random(len(coded)) < 0.5 if params.mirror_augment else np.zeros(len(coded), bool)
        total, correct = 0.0, 0
        for start in range(0, len(order), params.batch_size):
            idx = order[start : start + params.batch_size]
            f = flips[idx]
            x = np.where(f[:, None, None, None, None], mirrored[idx], coded[idx]) if f.any() else coded[idx]
            y = labels[idx] - 1
            y = np.where(f, mirror[y], y)
            opt.zero_grad()
            with T.Tape() as tape:
                logits = model.logits(Tensor(np.asarray(x, dtype=model.dtype)))
                loss = T.cross_entropy(logits, y)
            if not np.isfinite(loss.item()):
                raise NumericError(f"non-finite F-Net loss at epoch {epoch}")
            tape.backward(loss)
            opt.step()
            total += loss.item() * len(idx)
            correct += int((logits.data.argmax(1) == y).sum())
        history.append({"epoch": epoch, "loss": total / len(order), "top1": correct / len(order)})
        log.info("fpv epoch %d loss %.4f top1 %.3f", epoch, history[-1]["loss"], history[-1]["top1"])
        if callback is not None:
            callback(history[-1])
    return history
