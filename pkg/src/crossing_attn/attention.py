"""Patch-wise self-attention block.

For every location ``i`` the block gathers the k*k footprint ``R(i)`` of the
input, runs two streams over it and combines them::

    y_i = sum_j alpha(x_R(i))_j * beta(x_j),   alpha(x_R(i)) = gamma(delta(x_R(i)))

``delta`` is one of three relations between the ``phi`` and ``psi`` projections
(star, clique, concat).  ``gamma`` is a two-layer map producing one weight row
per footprint position; each row has ``d / s`` entries that are shared over
channel groups of size ``s``.  The aggregate is normalized, passed through ReLU,
expanded back to ``C`` channels and (optionally) added to the input.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from crossing_attn import tensor as T
from crossing_attn.layers import BatchNorm, Linear, Module
from crossing_attn.tensor import ShapeError, Tensor

VARIANTS = ("star", "clique", "concat")


@dataclass(frozen=True)
class SABlockConfig:
    channels_in: int
    reduced_dim: int
    footprint_k: int = 3
    variant: str = "concat"
    share_factor: int | None = None
    alpha_softmax: bool = False
    residual: bool = True
    alpha_hidden: int | None = None

    def __post_init__(self):
        if self.channels_in < 1 or self.reduced_dim < 1:
            raise ValueError("channels_in and reduced_dim must be positive")
        if self.reduced_dim > self.channels_in:
            raise ValueError(f"reduced_dim {self.reduced_dim} exceeds channels_in {self.channels_in}")
        if self.footprint_k < 1 or self.footprint_k % 2 == 0:
            raise ValueError(f"footprint_k must be odd and positive, got {self.footprint_k}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.share_factor is None:
            object.__setattr__(self, "share_factor", self.reduced_dim)
        if self.share_factor < 1 or self.reduced_dim % self.share_factor:
            raise ValueError(f"share_factor {self.share_factor} must divide reduced_dim {self.reduced_dim}")
        if self.alpha_hidden is None:
            object.__setattr__(self, "alpha_hidden", max(self.reduced_dim, self.footprint_k**2))

    @property
    def m(self) -> int:
        return self.footprint_k**2

    @property
    def groups(self) -> int:
        return self.reduced_dim // self.share_factor

    @property
    def delta_dim(self) -> int:
        return delta_length(self.variant, self.m, self.reduced_dim)


def delta_length(variant: str, m: int, d: int) -> int:
    if variant == "star":
        return m
    if variant == "clique":
        return m * m
    if variant == "concat":
        return d + m * d
    raise ValueError(f"unknown variant {variant!r}")


@dataclass
class Footprint:
    center: tuple[int, int]
    indices: list[tuple[int, int]]
    patch: np.ndarray
    valid: np.ndarray = field(repr=False)

    @property
    def center_pos(self) -> int:
        return len(self.indices) // 2


def extract_footprint(x: np.ndarray, i: tuple[int, int], k: int) -> Footprint:
    """k*k neighbourhood of location ``i`` in an (H, W, C) array, raster order.

    Positions outside the image hold zero features and ``valid == False``.
    """
    if k < 1 or k % 2 == 0:
        raise ValueError(f"footprint size must be odd, got {k}")
    h, w, c = x.shape
    y0, x0 = i
    if not (0 <= y0 < h and 0 <= x0 < w):
        raise ValueError(f"location {i} outside {h}x{w} image")
    r = k // 2
    indices, valid = [], []
    patch = np.zeros((k * k, c), dtype=x.dtype)
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            yy, xx = y0 + dy, x0 + dx
            inside = 0 <= yy < h and 0 <= xx < w
            if inside:
                patch[len(indices)] = x[yy, xx]
            indices.append((yy, xx))
            valid.append(inside)
    return Footprint(center=(y0, x0), indices=indices, patch=patch, valid=np.array(valid))


def compute_delta(variant: str, phi_patch: Tensor | None, psi_patch: Tensor, center: Tensor | None) -> Tensor:
    """Relation vector for each location.

    ``psi_patch`` is (..., m, d); ``phi_patch`` (..., m, d) is needed for clique;
    ``center`` (..., d) is phi of the centre location, needed for star and concat.
    Output is (..., m), (..., m*m) or (..., d + m*d) respectively.
    """
    *lead, m, d = psi_patch.shape
    lead = tuple(lead)
    if variant == "star":
        if center is None or center.shape != lead + (d,):
            raise ShapeError(f"star: centre shape {None if center is None else center.shape} vs psi {psi_patch.shape}")
        c = T.reshape(center, lead + (1, d))
        out = T.matmul(c, T.swapaxes(psi_patch, -1, -2))
        return T.reshape(out, lead + (m,))
    if variant == "clique":
        if phi_patch is None or phi_patch.shape != psi_patch.shape:
            raise ShapeError(f"clique: phi {None if phi_patch is None else phi_patch.shape} vs psi {psi_patch.shape}")
        out = T.matmul(phi_patch, T.swapaxes(psi_patch, -1, -2))
        return T.reshape(out, lead + (m * m,))
    if variant == "concat":
        if center is None or center.shape != lead + (d,):
            raise ShapeError(f"concat: centre shape {None if center is None else center.shape} vs psi {psi_patch.shape}")
        return T.concat([center, T.reshape(psi_patch, lead + (m * d,))], axis=-1)
    raise ValueError(f"unknown variant {variant!r}")


class AlphaMap(Module):
    """delta -> ReLU(linear) -> linear, reshaped to one weight row per footprint position."""

    def __init__(self, config: SABlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        self.fc1 = self.child("fc1", Linear(config.delta_dim, config.alpha_hidden, rng, dtype))
        self.fc2 = self.child("fc2", Linear(config.alpha_hidden, config.m * config.groups, rng, dtype, gain=0.1))
        self.fc2.bias.data[...] = 1.0 / config.m

    def __call__(self, delta: Tensor) -> Tensor:
        return compute_alpha(delta, self.config, self)


def compute_alpha(delta: Tensor, config: SABlockConfig, amap: AlphaMap) -> Tensor:
    """(..., L) -> (..., m, d/s); softmax over the footprint axis when configured."""
    if delta.shape[-1] != config.delta_dim:
        raise ShapeError(f"alpha: delta length {delta.shape[-1]}, {config.variant} expects {config.delta_dim}")
    hidden = T.relu(amap.fc1(delta))
    out = amap.fc2(hidden)
    alpha = T.reshape(out, delta.shape[:-1] + (config.m, config.groups))
    if config.alpha_softmax:
        alpha = T.softmax(alpha, axis=-2)
    return alpha


def aggregate(alpha: Tensor, beta_patch: Tensor, share: int) -> Tensor:
    """sum_j alpha_j * beta_j with alpha rows broadcast over groups of ``share`` channels.

    ``alpha`` is (..., m, g), ``beta_patch`` (..., m, g*share); returns (..., g*share).
    """
    *lead, m, g = alpha.shape
    lead = tuple(lead)
    if beta_patch.shape != lead + (m, g * share):
        raise ShapeError(f"aggregate: beta {beta_patch.shape} vs alpha {alpha.shape} with share {share}")
    a = T.expand(T.reshape(alpha, lead + (m, g, 1)), -1, share)
    b = T.reshape(beta_patch, lead + (m, g, share))
    y = T.sum(T.hadamard(a, b), axis=len(lead))
    return T.reshape(y, lead + (g * share,))


class SABlock(Module):
    def __init__(self, config: SABlockConfig, rng: np.random.Generator, dtype=np.float64):
        super().__init__()
        self.config = config
        c, d = config.channels_in, config.reduced_dim
        self.phi = self.child("phi", Linear(c, d, rng, dtype))
        self.psi = self.child("psi", Linear(c, d, rng, dtype))
        self.beta = self.child("beta", Linear(c, d, rng, dtype))
        self.alpha = self.child("alpha", AlphaMap(config, rng, dtype))
        self.norm = self.child("norm", BatchNorm(d, dtype))
        self.expand = self.child("expand", Linear(d, c, rng, dtype))

    def check(self) -> None:
        cfg = self.config
        for name, lin in (("phi", self.phi), ("psi", self.psi), ("beta", self.beta)):
            if lin.weight.shape != (cfg.channels_in, cfg.reduced_dim):
                raise ShapeError(f"SA block {name} weight {lin.weight.shape} disagrees with config")
        if self.alpha.fc1.weight.shape[0] != cfg.delta_dim or self.alpha.fc2.weight.shape[1] != cfg.m * cfg.groups:
            raise ShapeError("SA block alpha map disagrees with config")
        if self.expand.weight.shape != (cfg.reduced_dim, cfg.channels_in):
            raise ShapeError(f"SA block expansion weight {self.expand.weight.shape} disagrees with config")

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[-1] != cfg.channels_in:
            raise ShapeError(f"SA block expects (N, H, W, {cfg.channels_in}), got {x.shape}")
        patch = T.unfold(x, cfg.footprint_k)
        psi_p = self.psi(patch)
        beta_p = self.beta(patch)
        phi_p = self.phi(patch) if cfg.variant == "clique" else None
        center = self.phi(x) if cfg.variant != "clique" else None
        delta = compute_delta(cfg.variant, phi_p, psi_p, center)
        alpha = self.alpha(delta)
        y = aggregate(alpha, beta_p, cfg.share_factor)
        y = self.expand(T.relu(self.norm(y)))
        return T.add(y, x) if cfg.residual else y


def sa_block_forward(x: Tensor, config: SABlockConfig, weights: SABlock) -> Tensor:
    """Run the block on (H, W, C) or (N, H, W, C) input."""
    if weights.config != config:
        raise ShapeError("SA block weights were built for a different configuration")
    weights.check()
    if x.ndim == 3:
        y = weights(T.reshape(x, (1,) + x.shape))
        return T.reshape(y, x.shape)
    return weights(x)
