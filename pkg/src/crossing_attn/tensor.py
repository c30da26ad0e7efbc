"""Dense NHWC tensors with a tape-based reverse mode.

Every primitive checks its input shapes explicitly and never broadcasts
silently; broadcasting is spelled out with :func:`expand`.  A primitive is
recorded on the active :class:`Tape` only when one of its inputs requires a
gradient.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from crossing_attn import kernels


class ShapeError(ValueError):
    """Incompatible operand shapes for a primitive."""


class TapeError(RuntimeError):
    """Misuse of a tape: non-scalar loss, double backward."""


class NumericError(ArithmeticError):
    """A non-finite value where a finite one is required."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match tensor shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return hadamard(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype) if dtype is not None else np.asarray(x)
    return Tensor(arr)


class _Node:
    __slots__ = ("kind", "inputs", "out", "vjp")

    def __init__(self, kind, inputs, out, vjp):
        self.kind = kind
        self.inputs = inputs
        self.out = out
        self.vjp = vjp


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tape:
    """Ordered record of executed primitives.

    Use as a context manager; primitives executed inside the ``with`` block on
    inputs that require gradients are appended in execution order.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def record(self, kind: str, inputs: Sequence[Tensor], out: Tensor, vjp: Callable) -> None:
        if self.consumed:
            raise TapeError("cannot record on a consumed tape")
        self.nodes.append(_Node(kind, tuple(inputs), out, vjp))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        """Accumulate dloss/dleaf into every reachable ``requires_grad`` leaf.

        Returns the gradient contributed by this call for each leaf.
        """
        if self.consumed:
            raise TapeError("tape already consumed by a previous backward()")
        if loss.data.size != 1:
            raise TapeError(f"loss must be a scalar, got shape {loss.shape}")
        self.consumed = True
        produced = {id(n.out) for n in self.nodes}
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            in_grads = node.vjp(g)
            for t, gi in zip(node.inputs, in_grads):
                if gi is None or not t.requires_grad:
                    continue
                if gi.shape != t.shape:
                    raise ShapeError(f"{node.kind}: vjp produced {gi.shape} for input {t.shape}")
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + gi
                else:
                    grads[key] = gi
                if key not in produced:
                    leaves[key] = t
        if id(loss) not in produced and loss.requires_grad:
            leaves[id(loss)] = loss
        result = {}
        for key, t in leaves.items():
            g = grads[key].astype(t.dtype, copy=False)
            t.accumulate(g)
            result[t] = g
        return result


class no_grad:
    """Context in which nothing is recorded (used by finite differences and eval)."""

    def __enter__(self):
        _stack().append(None)
        return self

    def __exit__(self, *exc):
        _stack().pop()


def _emit(kind: str, data: np.ndarray, inputs: Sequence[Tensor], vjp: Callable) -> Tensor:
    req = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=req)
    if req:
        tape = active_tape()
        if tape is not None:
            tape.record(kind, inputs, out, vjp)
    return out


def _same_shape(kind: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: operand shapes differ, {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g))


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("hadamard", a, b)
    ad, bd = a.data, b.data
    return _emit("hadamard", ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scale(x: Tensor, c: float) -> Tensor:
    c = x.dtype.type(c)
    return _emit("scale", x.data * c, (x,), lambda g: (g * c,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _emit("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ex = np.exp(xd[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _emit("tanh", out, (x,), lambda g: (g * (1 - out * out),))


def log(x: Tensor) -> Tensor:
    if np.any(x.data <= 0):
        raise NumericError("log: non-positive input")
    xd = x.data
    return _emit("log", np.log(xd), (x,), lambda g: (g / xd,))


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched ``(..., m, k) @ (..., k, n)``; ``b`` may also be a shared 2-D matrix."""
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands must be at least 2-D, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch extents differ, {a.shape[:-2]} vs {b.shape[:-2]}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _emit("matmul", ad @ bd, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis; ``w`` is (in, out), ``b`` is (out,)."""
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise ShapeError(f"linear: bias {b.shape} does not match weight {w.shape}")
    xd, wd = x.data, w.data
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd
    if b is not None:
        out = out + b.data
    out = out.reshape(xd.shape[:-1] + (wd.shape[1],))

    def vjp(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd.T).reshape(xd.shape)
        gw = x2.T @ g2
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("linear", out, inputs, vjp)


def unfold(x: Tensor, k: int, stride: int = 1, pad: int | None = None) -> Tensor:
    """Gather k*k windows: (N, H, W, C) -> (N, Ho, Wo, k*k, C), zero padded."""
    if x.ndim != 4:
        raise ShapeError(f"unfold: expected (N, H, W, C), got {x.shape}")
    if pad is None:
        pad = k // 2
    n, h, w, c = x.shape
    if kernels.out_extent(h, k, stride, pad) < 1 or kernels.out_extent(w, k, stride, pad) < 1:
        raise ShapeError(f"unfold: window {k} with pad {pad} does not fit extents {(h, w)}")
    out = kernels.unfold(x.data, k, k, stride, pad)
    return _emit("unfold", out, (x,), lambda g: (kernels.fold(g, h, w, k, k, stride, pad),))


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, pad: int = 0) -> Tensor:
    """NHWC convolution; ``w`` is (kh, kw, C_in, C_out), square kernels only."""
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weight, got {x.shape} and {w.shape}")
    kh, kw, cin, cout = w.shape
    if kh != kw:
        raise ShapeError(f"conv2d: kernel must be square, got {kh}x{kw}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv2d: input channels {x.shape[3]} vs weight channels {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv2d: bias {b.shape} does not match {cout} output channels")
    n, h, wd_, _ = x.shape
    ho, wo = kernels.out_extent(h, kh, stride, pad), kernels.out_extent(wd_, kw, stride, pad)
    if ho < 1 or wo < 1:
        raise ShapeError(f"conv2d: kernel {kh} with pad {pad} does not fit extents {(h, wd_)}")
    cols = kernels.unfold(x.data, kh, kw, stride, pad).reshape(n * ho * wo, kh * kw * cin)
    wmat = w.data.reshape(kh * kw * cin, cout)
    out = cols @ wmat
    if b is not None:
        out = out + b.data
    out = out.reshape(n, ho, wo, cout)

    def vjp(g):
        g2 = g.reshape(-1, cout)
        gcols = (g2 @ wmat.T).reshape(n, ho, wo, kh * kw, cin)
        gx = kernels.fold(gcols, h, wd_, kh, kw, stride, pad)
        gw = (cols.T @ g2).reshape(w.shape)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    inputs = (x, w) if b is None else (x, w, b)
    return _emit("conv2d", out, inputs, vjp)


# ---------------------------------------------------------------------------
# normalization, pooling, softmax


class BatchNormState:
    """Running statistics for :func:`batch_norm` (not differentiated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5, dtype=np.float64):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Normalize over every axis but the last (channel) axis.

    Training mode uses the biased batch statistics and updates the running
    averages; eval mode is the affine map ``gamma * (x - mean) / sqrt(var + eps) + beta``.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma {gamma.shape} / beta {beta.shape} vs {c} channels")
    if state.running_mean.shape != (c,):
        raise ShapeError(f"batch_norm: running stats for {state.running_mean.shape[0]} channels, input has {c}")
    xd = x.data
    axes = tuple(range(xd.ndim - 1))
    dt = xd.dtype.type
    if training:
        count = xd.size // c
        mean = xd.mean(axis=axes)
        var = xd.var(axis=axes)
        m = state.momentum
        state.running_mean[...] = (1 - m) * state.running_mean + m * mean
        state.running_var[...] = (1 - m) * state.running_var + m * var
    else:
        mean = state.running_mean.astype(xd.dtype)
        var = state.running_var.astype(xd.dtype)
    invstd = (1.0 / np.sqrt(var + dt(state.eps))).astype(xd.dtype)
    xhat = (xd - mean) * invstd
    gd = gamma.data
    out = xhat * gd + beta.data

    def vjp(g):
        dgamma = (g * xhat).sum(axis=axes)
        dbeta = g.sum(axis=axes)
        dxhat = g * gd
        if training:
            dx = (invstd / count) * (
                count * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes)
            )
        else:
            dx = dxhat * invstd
        return dx, dgamma, dbeta

    return _emit("batch_norm", out, (x, gamma, beta), vjp)


def maxpool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 on (N, H, W, C); ties resolve to the first element."""
    if x.ndim != 4:
        raise ShapeError(f"maxpool2x2_stride2: expected (N, H, W, C), got {x.shape}")
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2_stride2: spatial extents must be even, got {h}x{w}")
    win = x.data.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4).reshape(n, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def vjp(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, idx[..., None], g[..., None], axis=-1)
        gx = gw.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(n, h, w, c)
        return (gx,)

    return _emit("maxpool2x2_stride2", out, (x,), vjp)


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.ndim == 0 or x.shape[axis] == 0:
        raise ShapeError(f"softmax: empty axis {axis} in shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return _emit("softmax", p, (x,), vjp)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of zero-based ``labels`` under softmax(logits)."""
    if logits.ndim != 2:
        raise ShapeError(f"cross_entropy: logits must be (B, K), got {logits.shape}")
    labels = np.asarray(labels, dtype=np.intp)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"cross_entropy: {labels.shape[0]} labels for batch {logits.shape[0]}")
    bsz = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(bsz), labels].mean()
    p = np.exp(logp)

    def vjp(g):
        d = p.copy()
        d[np.arange(bsz), labels] -= 1
        return (d * (g / bsz),)

    return _emit("cross_entropy", np.asarray(loss, dtype=logits.dtype), (logits,), vjp)


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("concat: no inputs")
    ref = tensors[0].shape
    nd = len(ref)
    ax = axis % nd
    for t in tensors[1:]:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1 :] != ref[:ax] + ref[ax + 1 :]:
            raise ShapeError(f"concat: shape {t.shape} incompatible with {ref} along axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(tensors))
        )

    return _emit("concat", np.concatenate([t.data for t in tensors], axis=ax), tuple(tensors), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}") from exc
    src = x.shape
    return _emit("reshape", out, (x,), lambda g: (g.reshape(src),))


def swapaxes(x: Tensor, a1: int, a2: int) -> Tensor:
    return _emit("swapaxes", np.swapaxes(x.data, a1, a2), (x,), lambda g: (np.swapaxes(g, a1, a2),))


def expand(x: Tensor, axis: int, reps: int) -> Tensor:
    """Repeat a size-1 axis ``reps`` times (the explicit form of broadcasting)."""
    if x.shape[axis] != 1:
        raise ShapeError(f"expand: axis {axis} of {x.shape} must have extent 1")
    out = np.repeat(x.data, reps, axis=axis)
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=axis, keepdims=True),))


def sum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    src = x.shape

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _emit("sum", np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), (x,), vjp)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = x.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([x.shape[a] for a in axes]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / count)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    ax = axis % x.ndim
    if not 0 <= start < stop <= x.shape[ax]:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of {x.shape}")
    idx = [slice(None)] * x.ndim
    idx[ax] = slice(start, stop)
    idx = tuple(idx)
    src_shape, dt = x.shape, x.dtype

    def vjp(g):
        gx = np.zeros(src_shape, dtype=dt)
        gx[idx] = g
        return (gx,)

    return _emit("slice", x.data[idx], (x,), vjp)


def global_avg_pool(x: Tensor) -> Tensor:
    """(N, H, W, C) -> (N, C)."""
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected (N, H, W, C), got {x.shape}")
    return mean(x, axis=(1, 2))


PRIMITIVES: dict[str, Callable[..., Tensor]] = {
    "matmul": matmul,
    "conv2d": conv2d,
    "linear": linear,
    "relu": relu,
    "batch_norm": batch_norm,
    "maxpool2x2_stride2": maxpool2x2,
    "softmax": softmax,
    "hadamard": hadamard,
    "concat": lambda *ts, **kw: concat(ts, **kw),
    "add": add,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "unfold": unfold,
    "reshape": reshape,
    "swapaxes": swapaxes,
    "expand": expand,
    "sum": sum,
    "mean": mean,
    "scale": scale,
    "slice": slice_axis,
    "cross_entropy": cross_entropy,
}


def forward_primitive(kind: str, inputs: Sequence[Tensor], **params) -> Tensor:
    """Apply primitive ``kind`` by name; ``params`` are the kind's keyword arguments."""
    try:
        fn = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive kind {kind!r}") from None
    return fn(*inputs, **params)


def finite_diff_grad(f: Callable[[Tensor], Tensor | float], x: Tensor, h: float = 1e-5) -> Tensor:
    """Central differences ``(f(x + h e_k) - f(x - h e_k)) / 2h`` for every element of ``x``.

    ``x`` is perturbed in place and restored; nothing is recorded on any tape.
    """
    flat = x.data.reshape(-1)
    grad = np.zeros(flat.shape, dtype=np.float64)

    def ev() -> float:
        val = f(x)
        v = float(val.item() if isinstance(val, Tensor) else val)
        if not np.isfinite(v):
            raise NumericError("finite_diff_grad: non-finite function value")
        return v

    with no_grad():
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            fp = ev()
            flat[k] = orig - h
            fm = ev()
            flat[k] = orig
            grad[k] = (fp - fm) / (2 * h)
    return Tensor(grad.reshape(x.shape))


def relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-8) -> float:
    """``||a - b|| / max(||a||, ||b||, floor)``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), floor)
    return float(np.linalg.norm(a - b) / denom)
