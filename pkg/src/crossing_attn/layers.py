"""Parameter containers: a tiny module tree with named parameters and buffers."""

from __future__ import annotations

from typing import Iterator

import numpy as np

from crossing_attn import tensor as T
from crossing_attn.tensor import Tensor


class Module:
    """Holds named parameters, buffers and child modules in insertion order."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._children: dict[str, Module] = {}
        self.training = True

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, mod in self._children.items():
            yield from mod.named_parameters(f"{prefix}{cname}.")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for name, arr in self._buffers.items():
            yield prefix + name, arr
        for cname, mod in self._children.items():
            yield from mod.named_buffers(f"{prefix}{cname}.")

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        missing = (set(own) | set(bufs)) - set(state)
        if missing:
            raise KeyError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for name, t in own.items():
            arr = np.asarray(state[name])
            if arr.shape != t.shape:
                raise T.ShapeError(f"{name}: checkpoint shape {arr.shape} vs model shape {t.shape}")
            t.data[...] = arr
        for name, buf in bufs.items():
            buf[...] = np.asarray(state[name]).reshape(buf.shape)

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.zero_grad()

    def train(self, mode: bool = True) -> "Module":
        self.training = mode
        for mod in self._children.values():
            mod.train(mode)
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def astype(self, dtype) -> "Module":
        for t in self.parameters():
            t.data = t.data.astype(dtype)
            t.grad = None
        return self


def he_init(rng: np.random.Generator, fan_in: int, shape, dtype) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / max(fan_in, 1))).astype(dtype)


class Linear(Module):
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, dtype=np.float64, gain: float = 1.0):
        super().__init__()
        self.n_in, self.n_out = n_in, n_out
        self.weight = self.param("weight", gain * he_init(rng, n_in, (n_in, n_out), dtype))
        self.bias = self.param("bias", np.zeros(n_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, dtype=np.float64,
                 stride: int = 1, pad: int | None = None):
        super().__init__()
        self.k, self.stride = k, stride
        self.pad = k // 2 if pad is None else pad
        self.weight = self.param("weight", he_init(rng, k * k * c_in, (k, k, c_in, c_out), dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm(Module):
    """Channel-last batch normalization with running statistics as buffers."""

    def __init__(self, channels: int, dtype=np.float64, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))
        self.state = T.BatchNormState(channels, momentum=momentum, eps=eps, dtype=np.float64)
        self._buffers["running_mean"] = self.state.running_mean
        self._buffers["running_var"] = self.state.running_var

    def __call__(self, x: Tensor) -> Tensor:
        return T.batch_norm(x, self.gamma, self.beta, self.state, self.training)
