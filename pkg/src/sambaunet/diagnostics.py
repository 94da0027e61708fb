"""Gradient-check suite over every op and composite module, and the scan benchmark."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import layers as L
from . import tensor as T
from .gradcheck import gradcheck
from .hiera import WindowAttention
from .hoacm import BSEA, HOACM, OCA
from .refiner import MlpAdapter, MlpAdapterConfig, Refiner, RefinerConfig
from .ssm import SS2D, VssBlock, VssBlockConfig, selective_scan
from .tensor import Tensor

GRAD_TOLERANCE = 1e-3
# ops whose probing step must stay clear of kinks (relu, max) use float64 and a tiny step
GRAD_STEP = 1e-6


@dataclass
class GradResult:
    name: str
    trials: int
    worst: float

    @property
    def passed(self) -> bool:
        return self.worst <= GRAD_TOLERANCE


def _leaf(rng, *shape, low=-1.0, high=1.0) -> Tensor:
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _extent(rng, low=2, high=8, even=False) -> int:
    n = int(rng.integers(low, high + 1))
    return n - n % 2 if even else n


def _unary(fn, low=-2.0, high=2.0):
    def case(rng):
        x = _leaf(rng, _extent(rng, 1, 4), _extent(rng), low=low, high=high)
        return lambda: fn(x), [x]
    return case


def _binary(fn, positive_y=False):
    def case(rng):
        shape = (_extent(rng, 1, 4), _extent(rng))
        x = _leaf(rng, *shape)
        y = _leaf(rng, 1, shape[1], low=0.5 if positive_y else -1.0, high=2.0 if positive_y else 1.0)
        return lambda: fn(x, y), [x, y]
    return case


def _matmul(rng):
    b, m, k, n = (_extent(rng, 1, 4) for _ in range(4))
    a, c = _leaf(rng, b, m, k), _leaf(rng, k, n)
    return lambda: T.matmul(a, c), [a, c]


def _reduce(mode):
    def case(rng):
        x = _leaf(rng, _extent(rng, 1, 3), _extent(rng), _extent(rng))
        axis = [None, 0, 1, 2, (1, 2)][int(rng.integers(5))]
        keep = bool(rng.integers(2))
        return lambda: T.reduce(x, axis, mode, keepdims=keep), [x]
    return case


def _softmax(fn):
    def case(rng):
        x = _leaf(rng, _extent(rng, 1, 3), _extent(rng), low=-3, high=3)
        axis = int(rng.integers(2))
        return lambda: fn(x, axis=axis), [x]
    return case


def _layer_norm(rng):
    B, C, H = _extent(rng, 1, 3), _extent(rng, 2, 8), _extent(rng, 1, 4)
    x = _leaf(rng, B, C, H)
    w, b = _leaf(rng, C), _leaf(rng, C)
    return lambda: T.layer_norm(x, w, b, axis=1), [x, w, b]


def _shape_ops(rng):
    x = _leaf(rng, 2, _extent(rng, 2, 4), _extent(rng, 2, 6))
    y = _leaf(rng, 2, x.shape[1], 3)

    def fn():
        z = T.concat([T.flip(x, 2), y], axis=2)
        z = T.permute(T.reshape(z, (2, x.shape[1], -1)), (2, 0, 1))
        z = T.stack([z[1:], z[:-1]], axis=0)
        return T.swapaxes(z, 0, 3)

    return fn, [x, y]


def _pad_upsample(rng):
    x = _leaf(rng, 1, 2, _extent(rng, 1, 4), _extent(rng, 1, 4))
    pad = int(rng.integers(0, 3))
    return lambda: T.upsample_nearest(T.pad2d(x, pad), 2), [x]


def _conv(rng):
    ci, co = _extent(rng, 1, 3), _extent(rng, 1, 3)
    k = int(rng.choice([1, 3]))
    s, p = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    n = _extent(rng, max(k, 3), 8)
    x, w, b = _leaf(rng, 2, ci, n, n), _leaf(rng, co, ci, k, k), _leaf(rng, co)
    return lambda: L.conv2d(x, w, b, s, p), [x, w, b]


def _conv_transpose(rng):
    ci, co, k = _extent(rng, 1, 3), _extent(rng, 1, 3), int(rng.choice([2, 3]))
    s = int(rng.integers(1, 3))
    p = int(rng.integers(0, k // 2 + 1))
    op = int(rng.integers(0, s)) if s > 1 else 0
    x = _leaf(rng, 1, ci, _extent(rng, 2, 5), _extent(rng, 2, 5))
    w, b = _leaf(rng, ci, co, k, k), _leaf(rng, co)
    return lambda: L.conv_transpose2d(x, w, b, s, p, op), [x, w, b]


def _depthwise(rng):
    C, k = _extent(rng, 1, 4), int(rng.choice([3, 5]))
    x, w, b = _leaf(rng, 2, C, _extent(rng), _extent(rng)), _leaf(rng, C, k, k), _leaf(rng, C)
    return lambda: L.depthwise_conv2d(x, w, b), [x, w, b]


def _pool(mode):
    def case(rng):
        k = int(rng.integers(1, 4))
        s = int(rng.integers(1, k + 1))
        x = _leaf(rng, 2, 2, _extent(rng, k, 8), _extent(rng, k, 8))
        return lambda: L.pool2d(x, mode, k, s), [x]
    return case


def _adaptive(mode):
    def case(rng):
        x = _leaf(rng, 1, 2, _extent(rng, 2, 8), _extent(rng, 2, 8))
        out = (int(rng.integers(1, x.shape[2] + 1)), int(rng.integers(1, x.shape[3] + 1)))
        return lambda: L.adaptive_pool2d(x, mode, out), [x]
    return case


def _scan(rng):
    G, D, Lq, N = _extent(rng, 1, 2), _extent(rng, 1, 3), _extent(rng, 1, 8), _extent(rng, 1, 3)
    x, B, C = _leaf(rng, G, D, Lq), _leaf(rng, G, N, Lq), _leaf(rng, G, N, Lq)
    delta = _leaf(rng, G, D, Lq, low=0.05, high=1.0)
    A = _leaf(rng, G, D, N, low=-2.0, high=-0.1)
    Dk = _leaf(rng, G, D)
    return lambda: selective_scan(x, delta, A, B, C, Dk), [x, delta, A, B, C, Dk]


def _module_case(build: Callable):
    """Check a module w.r.t. its input(s) and every parameter.

    ``build(rng)`` returns the module and the list of input shapes.
    """
    def case(rng):
        module, shapes = build(rng)
        module.init_parameters(int(rng.integers(1 << 30)))
        for p in module.parameters():  # move off init symmetries (zero biases, unit norms)
            p.data = p.data + rng.uniform(-0.1, 0.1, size=p.shape)
        xs = [_leaf(rng, *shape) for shape in shapes]
        return lambda: module(*xs), xs + module.parameters()
    return case


def _micro(rng):
    return _extent(rng, 2, 8, even=True)


@_module_case
def _refiner(rng):
    C, n = _extent(rng, 2, 4), _micro(rng)
    return Refiner(RefinerConfig(C, ratio=0.5)), [(1, n, n, C)]


@_module_case
def _adapter(rng):
    C = _extent(rng, 2, 6)
    return MlpAdapter(MlpAdapterConfig(C, ratio=0.5)), [(2, _extent(rng, 1, 4), C)]


@_module_case
def _window_attention(rng):
    heads = int(rng.choice([1, 2]))
    C, w = heads * _extent(rng, 1, 3), int(rng.choice([2, 3]))
    return WindowAttention(C, heads, w), [(_extent(rng, 1, 3), w * w, C)]


@_module_case
def _ss2d(rng):
    E = _extent(rng, 1, 3)
    return SS2D(E, state_size=2), [(1, E, _extent(rng, 1, 4), _extent(rng, 1, 4))]


@_module_case
def _vss(rng):
    C = _extent(rng, 1, 3)
    block = VssBlock(VssBlockConfig(C, state_size=2, expand=int(rng.integers(1, 3))))
    return block, [(1, C, _extent(rng, 1, 4), _extent(rng, 1, 4))]


@_module_case
def _bsea(rng):
    C, n = _extent(rng, 1, 3), _micro(rng)
    return BSEA(C, (n, n)), [(1, C, n, n)]


@_module_case
def _oca(rng):
    return OCA(), [(1, _extent(rng, 1, 3), _micro(rng), _micro(rng))]


@_module_case
def _fuse(rng):
    C, n = _extent(rng, 1, 3), _micro(rng)
    return HOACM(C, (n, n)), [(1, C, n, n)] * 2


@_module_case
def _group_norm(rng):
    C = _extent(rng, 1, 3)
    return L.GroupNorm1(C), [(2, C, _extent(rng), _extent(rng))]


@_module_case
def _linear(rng):
    i = _extent(rng, 1, 5)
    return L.Linear(i, _extent(rng, 1, 5)), [(_extent(rng, 1, 3), i)]


SUITE: dict[str, Callable] = {
    "add": _binary(lambda x, y: x + y),
    "mul": _binary(lambda x, y: x * y),
    "div": _binary(lambda x, y: x / y, positive_y=True),
    "sub": _binary(lambda x, y: x - y),
    "exp": _unary(T.exp),
    "log": _unary(T.log, 0.2, 3.0),
    "sqrt": _unary(T.sqrt, 0.2, 3.0),
    "square": _unary(T.square),
    "reciprocal": _unary(T.reciprocal, 0.3, 3.0),
    "relu": _unary(T.relu),
    "sigmoid": _unary(T.sigmoid),
    "silu": _unary(T.silu),
    "softplus": _unary(T.softplus),
    "gelu": _unary(T.gelu),
    "matmul": _matmul,
    "sum": _reduce("sum"),
    "mean": _reduce("mean"),
    "max": _reduce("max"),
    "softmax": _softmax(T.softmax),
    "log_softmax": _softmax(T.log_softmax),
    "layer_norm": _layer_norm,
    "shape_ops": _shape_ops,
    "pad_upsample": _pad_upsample,
    "conv2d": _conv,
    "conv_transpose2d": _conv_transpose,
    "depthwise_conv2d": _depthwise,
    "max_pool": _pool("max"),
    "avg_pool": _pool("avg"),
    "adaptive_max_pool": _adaptive("max"),
    "adaptive_avg_pool": _adaptive("avg"),
    "selective_scan": _scan,
    "linear": _linear,
    "group_norm": _group_norm,
    "refiner": _refiner,
    "mlp_adapter": _adapter,
    "window_attention": _window_attention,
    "ss2d": _ss2d,
    "vss_block": _vss,
    "bsea": _bsea,
    "oca": _oca,
    "fuse": _fuse,
}

COMPOSITES = ("refiner", "mlp_adapter", "window_attention", "vss_block", "bsea", "oca", "fuse")


def run_gradient_suite(trials: int = 20, seed: int = 0, names=None, max_elements: int = 16,
                       report: Callable[[GradResult], None] | None = None) -> list[GradResult]:
    """Run each case on ``trials`` random micro-inputs in float64."""
    results = []
    for i, name in enumerate(names or SUITE):
        rng = np.random.default_rng([seed, i])
        worst = 0.0
        with T.default_dtype(np.float64):
            for trial in range(trials):
                fn, tensors = SUITE[name](rng)
                worst = max(worst, gradcheck(fn, tensors, step=GRAD_STEP, seed=7919 + trial,
                                             max_elements=max_elements))
        res = GradResult(name, trials, worst)
        results.append(res)
        if report:
            report(res)
    return results


# ---------------------------------------------------------------------------
# scan benchmark
# ---------------------------------------------------------------------------

@dataclass
class BenchRow:
    length: int
    seconds: float
    ratio: float | None  # t(L) / t(L/2)


def bench_scan(lengths=(512, 1024, 2048, 4096, 8192), channels: int = 16, state_size: int = 8,
               repeats: int = 7, seed: int = 0) -> list[BenchRow]:
    """Median forward+backward time of the scan at each length, with doubling ratios."""
    rng = np.random.default_rng(seed)
    rows: list[BenchRow] = []
    previous = None
    for n in lengths:
        x = Tensor(rng.standard_normal((1, channels, n)), requires_grad=True)
        delta = Tensor(rng.uniform(0.01, 0.1, (1, channels, n)), requires_grad=True)
        A = Tensor(-rng.uniform(0.5, 1.5, (1, channels, state_size)), requires_grad=True)
        B = Tensor(rng.standard_normal((1, state_size, n)), requires_grad=True)
        C = Tensor(rng.standard_normal((1, state_size, n)), requires_grad=True)
        D = Tensor(np.ones((1, channels)), requires_grad=True)
        selective_scan(x, delta, A, B, C, D).sum().backward()  # compile / warm caches
        times = []
        for _ in range(repeats):
            start = time.perf_counter()
            selective_scan(x, delta, A, B, C, D).sum().backward()
            times.append(time.perf_counter() - start)
        t = float(np.median(times))
        rows.append(BenchRow(n, t, None if previous is None else t / previous))
        previous = t
    return rows
