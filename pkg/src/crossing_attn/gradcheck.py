"""Finite-difference gradient suite.

Every check builds a small random problem, reduces its output to a scalar by
a fixed random projection and compares the tape gradient of every leaf with
central differences.  The error of one case is the relative error of all leaf
gradients concatenated.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from crossing_attn import tensor as T
from crossing_attn.attention import SABlock, SABlockConfig
from crossing_attn.fpv import LSTMCell, RecurrentState
from crossing_attn.tensor import Tensor

TOLERANCE = 1e-4
DEFAULT_SEEDS = 20
# A 1e-5 step occasionally straddles a ReLU kink inside an SA block; 1e-6 keeps
# the round-off error near 1e-9 in double precision while making that rarer.
FD_STEP = 1e-6

Builder = Callable[[np.random.Generator], tuple[list[Tensor], Callable[[], Tensor]]]


@dataclass
class CheckResult:
    name: str
    seed: int
    rel_error: float
    n_params: int
    seconds: float
    passed: bool

    def to_dict(self) -> dict:
        return asdict(self)


def _leaf(rng, shape, lo=None, hi=None) -> Tensor:
    data = rng.uniform(lo, hi, shape) if lo is not None else rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _project(out: Tensor, rng: np.random.Generator) -> Callable[[Tensor], Tensor]:
    r = Tensor(rng.standard_normal(out.shape))
    return lambda y: T.sum(T.hadamard(y, r))


def _unary(op, shape=(3, 4), lo=None, hi=None) -> Builder:
    def build(rng):
        x = _leaf(rng, shape, lo, hi)
        proj = _project(op(x), rng)
        return [x], lambda: proj(op(x))
    return build


def _with_leaves(make) -> Builder:
    """``make(rng) -> (leaves, forward)``; the forward output is projected to a scalar."""
    def build(rng):
        leaves, fwd = make(rng)
        with T.no_grad():
            proj = _project(fwd(), rng)
        return leaves, lambda: proj(fwd())
    return build


def _binary(op, sa, sb) -> Builder:
    def make(rng):
        a, b = _leaf(rng, sa), _leaf(rng, sb)
        return [a, b], lambda: op(a, b)
    return _with_leaves(make)


def _batch_norm(training: bool) -> Builder:
    def make(rng):
        x, g, b = _leaf(rng, (2, 3, 3, 4)), _leaf(rng, (4,)), _leaf(rng, (4,))
        state = T.BatchNormState(4)
        state.running_mean[:] = rng.standard_normal(4)
        state.running_var[:] = rng.uniform(0.5, 2.0, 4)
        return [x, g, b], lambda: T.batch_norm(x, g, b, state, training)
    return _with_leaves(make)


def _conv(stride: int, pad: int) -> Builder:
    def make(rng):
        x, w, b = _leaf(rng, (2, 5, 5, 2)), _leaf(rng, (3, 3, 2, 3)), _leaf(rng, (3,))
        return [x, w, b], lambda: T.conv2d(x, w, b, stride=stride, pad=pad)
    return _with_leaves(make)


def _cross_entropy(rng):
    z = _leaf(rng, (4, 7))
    labels = rng.integers(0, 7, 4)
    return [z], lambda: T.cross_entropy(z, labels)


def _concat(rng):
    a, b = _leaf(rng, (2, 3)), _leaf(rng, (2, 2))
    return [a, b], lambda: T.concat([a, b], axis=-1)


def _module_check(module_factory, input_shape, call=None) -> Builder:
    def make(rng):
        mod = module_factory(rng)
        for _, p in mod.named_parameters():
            p.data[...] = p.data + 0.1 * rng.standard_normal(p.shape)
        x = _leaf(rng, input_shape)
        fwd = (lambda: mod(x)) if call is None else (lambda: call(mod, x))
        return [x] + mod.parameters(), fwd
    return _with_leaves(make)


def _sa_block(variant: str, k: int) -> Builder:
    cfg = SABlockConfig(channels_in=4, reduced_dim=2, footprint_k=k, variant=variant)
    return _module_check(lambda rng: SABlock(cfg, rng), (2, 3, 3, 4))


def _transition() -> Builder:
    from crossing_attn.tnet import Transition
    return _module_check(lambda rng: Transition(3, 5, rng), (2, 4, 4, 3))


def _lstm(rng):
    cell = LSTMCell(3, 4, rng)
    x = _leaf(rng, (2, 3))
    h, c = _leaf(rng, (2, 4)), _leaf(rng, (2, 4))

    def fwd():
        s = cell(x, RecurrentState(h, c))
        return T.concat([s.h, s.c], axis=-1)
    return [x, h, c] + cell.parameters(), fwd


def _lstm_chain(rng):
    cell = LSTMCell(3, 4, rng)
    xs = [_leaf(rng, (2, 3)) for _ in range(3)]

    def fwd():
        s = RecurrentState.zeros(2, 4)
        for x in xs:
            s = cell(x, s)
        return s.h
    return xs + cell.parameters(), fwd


def _micro_tnet(rng):
    from crossing_attn.tnet import TNet, TNetConfig
    cfg = TNetConfig(input_size=(8, 8), stage_channels=(2, 4), sa_blocks_per_stage=(1, 1),
                     variant="concat", footprint_k=3, num_classes=7, seed=int(rng.integers(1 << 30)))
    net = TNet(cfg)
    for _, p in net.named_parameters():
        p.data[...] = p.data + 0.1 * rng.standard_normal(p.shape)
    x = _leaf(rng, (2, 8, 8, 3))
    labels = rng.integers(0, 7, 2)
    return [x] + net.parameters(), lambda: T.cross_entropy(net.logits(x), labels)


CHECKS: dict[str, Builder] = {
    "add": _binary(T.add, (3, 4), (3, 4)),
    "hadamard": _binary(T.hadamard, (3, 4), (3, 4)),
    "scale": _unary(lambda x: T.scale(x, -1.7)),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "tanh": _unary(T.tanh),
    "log": _unary(T.log, lo=0.5, hi=2.0),
    "matmul": _binary(T.matmul, (2, 3, 4), (2, 4, 5)),
    "matmul_shared": _binary(T.matmul, (2, 3, 4), (4, 5)),
    "linear": _with_leaves(lambda rng: (lambda x, w, b: ([x, w, b], lambda: T.linear(x, w, b)))(
        _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5)), _leaf(rng, (5,)))),
    "conv2d": _conv(1, 1),
    "conv2d_stride2": _conv(2, 1),
    "unfold": _unary(lambda x: T.unfold(x, 3), shape=(1, 4, 3, 2)),
    "batch_norm_train": _batch_norm(True),
    "batch_norm_eval": _batch_norm(False),
    "maxpool2x2_stride2": _unary(T.maxpool2x2, shape=(2, 4, 6, 3)),
    "softmax": _unary(lambda x: T.softmax(x, axis=-1), shape=(3, 5)),
    "softmax_axis0": _unary(lambda x: T.softmax(x, axis=0), shape=(4, 3)),
    "cross_entropy": _cross_entropy,
    "concat": _with_leaves(_concat),
    "reshape": _unary(lambda x: T.reshape(x, (4, 3))),
    "swapaxes": _unary(lambda x: T.swapaxes(x, 0, 1)),
    "expand": _unary(lambda x: T.expand(T.reshape(x, (3, 4, 1)), -1, 3)),
    "sum_axis": _unary(lambda x: T.sum(x, axis=1)),
    "mean": _unary(lambda x: T.mean(x, axis=0)),
    "slice": _unary(lambda x: T.slice_axis(x, 1, 1, 3)),
    "global_avg_pool": _unary(T.global_avg_pool, shape=(2, 3, 3, 4)),
    **{f"sa_block_{v}_k{k}": _sa_block(v, k) for v in ("star", "clique", "concat") for k in (1, 3)},
    "transition": _transition(),
    "lstm_cell": _with_leaves(_lstm),
    "lstm_chain": _with_leaves(_lstm_chain),
    "micro_tnet": _micro_tnet,
}


def run_check(name: str, seed: int, tol: float = TOLERANCE) -> CheckResult:
    start = time.perf_counter()
    rng = np.random.default_rng([seed, sum(map(ord, name))])
    leaves, loss_fn = CHECKS[name](rng)
    for leaf in leaves:
        leaf.grad = None
    with T.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = np.concatenate([(l.grad if l.grad is not None else np.zeros(l.shape)).reshape(-1) for l in leaves])
    numeric = np.concatenate([T.finite_diff_grad(lambda _: loss_fn(), l, h=FD_STEP).data.reshape(-1) for l in leaves])
    err = T.relative_error(analytic, numeric)
    return CheckResult(name, seed, err, int(analytic.size), time.perf_counter() - start, bool(err <= tol))


def run_suite(seeds: int = DEFAULT_SEEDS, base_seed: int = 0, names=None, tol: float = TOLERANCE) -> list[CheckResult]:
    names = list(CHECKS) if names is None else list(names)
    unknown = set(names) - set(CHECKS)
    if unknown:
        raise KeyError(f"unknown gradient checks: {sorted(unknown)}")
    return [run_check(n, base_seed + s, tol) for n in names for s in range(seeds)]
