"""Third-person-view intersection classifier (T-Net).

stem conv -> [transition -> SA blocks] per stage -> global average pool -> linear -> softmax
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from crossing_attn import tensor as T
from crossing_attn.attention import VARIANTS, SABlock, SABlockConfig
from crossing_attn.layers import BatchNorm, Conv2d, Linear, Module
from crossing_attn.optim import SGD
from crossing_attn.pdv import INTERSECTION_MIRROR, IntersectionPDV
from crossing_attn.tensor import NumericError, ShapeError, Tensor

log = logging.getLogger(__name__)

CONFIG_KEYS = ("input_size", "stage_channels", "sa_blocks_per_stage", "variant", "footprint_k", "num_classes", "seed")


@dataclass(frozen=True)
class TNetConfig:
    input_size: tuple[int, int] = (224, 224)
    stage_channels: tuple[int, ...] = (64, 256, 512, 1024, 2048)
    sa_blocks_per_stage: tuple[int, ...] = (2, 3, 4, 6, 4)
    variant: str = "concat"
    footprint_k: int = 3
    num_classes: int = 7
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        object.__setattr__(self, "stage_channels", tuple(int(v) for v in self.stage_channels))
        object.__setattr__(self, "sa_blocks_per_stage", tuple(int(v) for v in self.sa_blocks_per_stage))
        if len(self.input_size) != 2:
            raise ValueError(f"input_size must be (height, width), got {self.input_size}")
        if len(self.stage_channels) != len(self.sa_blocks_per_stage):
            raise ValueError("stage_channels and sa_blocks_per_stage must have one entry per transition")
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be non-empty and positive")
        if min(self.sa_blocks_per_stage) < 0:
            raise ValueError("sa_blocks_per_stage entries must be non-negative")
        scale = 2 ** len(self.stage_channels)
        if any(s % scale for s in self.input_size):
            raise ValueError(f"input_size {self.input_size} must be divisible by {scale} for {len(self.stage_channels)} halvings")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.footprint_k < 1 or self.footprint_k % 2 == 0:
            raise ValueError("footprint_k must be odd")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def total_blocks(self) -> int:
        return sum(self.sa_blocks_per_stage)

    @property
    def stage_resolutions(self) -> list[tuple[int, int]]:
        h, w = self.input_size
        return [(h >> (s + 1), w >> (s + 1)) for s in range(len(self.stage_channels))]

    def block_config(self, channels: int) -> SABlockConfig:
        return SABlockConfig(channels_in=channels, reduced_dim=max(1, channels // 2),
                             footprint_k=self.footprint_k, variant=self.variant)

    def to_json(self) -> str:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        d["stage_channels"] = list(self.stage_channels)
        d["sa_blocks_per_stage"] = list(self.sa_blocks_per_stage)
        return json.dumps({k: d[k] for k in CONFIG_KEYS}, indent=2, sort_keys=False)

    @classmethod
    def from_dict(cls, d: dict) -> "TNetConfig":
        keys = set(d)
        if keys != set(CONFIG_KEYS):
            extra, missing = sorted(keys - set(CONFIG_KEYS)), sorted(set(CONFIG_KEYS) - keys)
            raise ValueError(f"T-Net config keys mismatch; unexpected {extra}, missing {missing}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TNetConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


PAPER_CONFIG = TNetConfig()
TOY_CONFIG = TNetConfig(input_size=(64, 64), stage_channels=(8, 16, 32, 64, 64),
                        sa_blocks_per_stage=(1, 1, 1, 1, 1), variant="concat", footprint_k=3)


class Transition(Module):
    """BN -> ReLU -> 2x2 max pool (stride 2) -> channel-expanding linear map."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.norm = self.child("norm", BatchNorm(c_in, dtype))
        self.proj = self.child("proj", Linear(c_in, c_out, rng, dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return transition_forward(x, self)

    def output_shape(self, shape: tuple[int, ...]) -> tuple[int, ...]:
        n, h, w, _ = shape
        return (n, h // 2, w // 2, self.c_out)


def transition_forward(x: Tensor, weights: Transition) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"transition expects (N, H, W, C), got {x.shape}")
    if x.shape[1] % 2 or x.shape[2] % 2:
        raise ShapeError(f"transition needs even spatial extents, got {x.shape[1]}x{x.shape[2]}")
    if x.shape[3] != weights.c_in:
        raise ShapeError(f"transition expects {weights.c_in} channels, got {x.shape[3]}")
    return weights.proj(T.maxpool2x2(T.relu(weights.norm(x))))


class TNet(Module):
    def __init__(self, config: TNetConfig, dtype=np.float64):
        super().__init__()
        self.config = config
        rng = np.random.default_rng(config.seed)
        c0 = config.stage_channels[0]
        self.stem = self.child("stem", Conv2d(3, c0, 3, rng, dtype))
        self.stages: list[tuple[Transition, list[SABlock]]] = []
        c_prev = c0
        for s, (c, nb) in enumerate(zip(config.stage_channels, config.sa_blocks_per_stage)):
            tr = self.child(f"transition{s}", Transition(c_prev, c, rng, dtype))
            blocks = [self.child(f"stage{s}.sa{b}", SABlock(config.block_config(c), rng, dtype)) for b in range(nb)]
            self.stages.append((tr, blocks))
            c_prev = c
        self.head = self.child("head", Linear(c_prev, config.num_classes, rng, dtype))

    def logits(self, x: Tensor, trace: list | None = None) -> Tensor:
        h, w = self.config.input_size
        if x.ndim != 4 or x.shape[1:] != (h, w, 3):
            raise ShapeError(f"T-Net expects (N, {h}, {w}, 3) input, got {x.shape}")
        x = self.stem(x)
        for tr, blocks in self.stages:
            x = tr(x)
            for blk in blocks:
                x = blk(x)
            if trace is not None:
                trace.append(x.shape[1:])
        out = self.head(T.global_avg_pool(x))
        if trace is not None:
            trace.append(out.shape[1:])
        return out

    def shape_trace(self) -> list[tuple[int, ...]]:
        """Per-stage output shapes from the layer shape rules, without running the network."""
        h, w = self.config.input_size
        shape = (1, h, w, self.config.stage_channels[0])
        trace = []
        for tr, blocks in self.stages:
            shape = tr.output_shape(shape)
            for blk in blocks:
                if blk.config.channels_in != shape[3]:
                    raise ShapeError("SA block channel count disagrees with its stage")
            trace.append(shape[1:])
        trace.append((self.head.n_out,))
        return trace

    def predict_proba(self, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
        was = self.training
        self.eval()
        out = []
        with T.no_grad():
            for i in range(0, len(images), batch_size):
                batch = Tensor(np.asarray(images[i : i + batch_size], dtype=self.dtype))
                out.append(T.softmax(self.logits(batch)).data.astype(np.float64))
        self.train(was)
        return np.concatenate(out, axis=0)

    @property
    def dtype(self):
        return self.stem.weight.dtype


def tnet_forward(image: np.ndarray | Tensor, config: TNetConfig, weights: TNet) -> IntersectionPDV:
    """Classify one (H, W, 3) image."""
    if weights.config != config:
        raise ShapeError("T-Net weights were built for a different configuration")
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    if data.shape != tuple(config.input_size) + (3,):
        raise ShapeError(f"T-Net expects a {config.input_size[0]}x{config.input_size[1]}x3 image, got {data.shape}")
    return IntersectionPDV(weights.predict_proba(data[None])[0])


@dataclass
class TrainParams:
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mirror_augment: bool = True
    seed: int = 0
    lr_schedule: str = "cosine"


@dataclass
class EpochMetrics:
    epoch: int
    loss: float
    top1: float
    lr: float = field(default=0.0)


def tnet_train_epoch(model: TNet, images: np.ndarray, labels: np.ndarray, optimizer: SGD,
                     rng: np.random.Generator, batch_size: int = 32, mirror_augment: bool = False,
                     epoch: int = 0) -> EpochMetrics:
    """One pass of SGD over the split; ``labels`` are 1..num_classes.

    With ``mirror_augment`` each sample is flipped left/right with probability
    1/2 and its label swapped by the mirror rule.
    """
    if len(images) == 0:
        raise ValueError("empty training split")
    labels = np.asarray(labels)
    if labels.min() < 1 or labels.max() > model.config.num_classes:
        raise ValueError(f"labels must lie in 1..{model.config.num_classes}")
    model.train()
    order = rng.permutation(len(images))
    flips = rng.random(len(images)) < 0.5 if mirror_augment else np.zeros(len(images), dtype=bool)
    mirror = np.asarray(INTERSECTION_MIRROR)
    total_loss, correct = 0.0, 0
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        x = np.asarray(images[idx], dtype=model.dtype)
        y = labels[idx] - 1
        f = flips[idx]
        if f.any():
            x = x.copy()
            x[f] = x[f, :, ::-1]
            y = np.where(f, mirror[y], y)
        optimizer.zero_grad()
        with T.Tape() as tape:
            logits = model.logits(Tensor(x))
            loss = T.cross_entropy(logits, y)
        lv = loss.item()
        if not np.isfinite(lv):
            raise NumericError(f"non-finite training loss at epoch {epoch}, batch starting {start}")
        tape.backward(loss)
        optimizer.step()
        total_loss += lv * len(idx)
        correct += int((logits.data.argmax(axis=1) == y).sum())
    return EpochMetrics(epoch=epoch, loss=total_loss / len(order), top1=correct / len(order), lr=optimizer.lr)


def scheduled_lr(params: TrainParams, epoch: int) -> float:
    if params.lr_schedule == "cosine":
        return 0.5 * params.lr * (1 + np.cos(np.pi * epoch / params.epochs))
    return params.lr


def train_tnet(model: TNet, images: np.ndarray, labels: np.ndarray, params: TrainParams,
               callback=None) -> list[EpochMetrics]:
    rng = np.random.default_rng(params.seed)
    opt = SGD(model.parameters(), lr=params.lr, momentum=params.momentum, weight_decay=params.weight_decay)
    history = []
    for epoch in range(params.epochs):
        opt.lr = scheduled_lr(params, epoch)
        m = tnet_train_epoch(model, images, labels, opt, rng, params.batch_size, params.mirror_augment, epoch)
        log.info("epoch %d loss %.4f top1 %.3f lr %.4f", epoch, m.loss, m.top1, m.lr)
        history.append(m)
        if callback is not None:
            callback(m)
    return history
