"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation records a :class:`TapeNode` on its output that
references the input tensors and a closure mapping the output gradient to the
input gradients. :meth:`Tensor.backward` walks the resulting DAG once in
reverse topological order, accumulating gradients additively.

Storage is NumPy, ``float32`` unless :func:`default_dtype` selects otherwise.
"""

from __future__ import annotations

import contextlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

logger = logging.getLogger(__name__)

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


@contextlib.contextmanager
def default_dtype(dtype):
    """Temporarily change the dtype used for newly constructed tensors."""
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


def get_default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def no_grad():
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@dataclass(eq=False)
class TapeNode:
    op: str
    inputs: tuple
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    saved: dict = field(default_factory=dict)


class Tensor:
    """A dense array with an optional gradient slot."""

    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        if arr.ndim and 0 in arr.shape:
            raise DimensionError(f"tensor extents must be positive, got {arr.shape}")
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: TapeNode | None = None

    # -- basic attributes -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- autograd ---------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Populate ``grad`` on every leaf reachable from this tensor."""
        if grad is None:
            if self.data.size != 1:
                raise ContractError(
                    f"backward() without an explicit gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        if not self.requires_grad:
            logger.warning("backward() called on a tensor that is not on the tape; nothing to do")
            return

        order = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for t in reversed(order):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t.node is None:
                if t.grad is None:
                    t.grad = np.array(g, dtype=t.data.dtype, copy=True)
                else:
                    t.grad += g
                continue
            in_grads = t.node.backward(g)
            for inp, ig in zip(t.node.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ig
                else:
                    grads[key] = ig

    # -- operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(as_tensor(other, like=self)))

    def __rsub__(self, other):
        return add(as_tensor(other, like=self), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, (int, float)):
            return mul(self, 1.0 / other)
        return mul(self, reciprocal(as_tensor(other, like=self)))

    def __rtruediv__(self, other):
        return mul(as_tensor(other, like=self), reciprocal(self))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def permute(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce(self, axis, "sum", keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce(self, axis, "mean", keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce(self, axis, "max", keepdims)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen:
            continue
        seen.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for inp in t.node.inputs:
                if inp.requires_grad and id(inp) not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(value, like: Tensor | None = None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    dtype = like.dtype if like is not None else None
    return Tensor(value, dtype=dtype)


def record(op: str, data: np.ndarray, inputs: Iterable[Tensor], backward, **saved) -> Tensor:
    """Wrap ``data`` in a tensor and, when needed, attach a tape node.

    ``backward`` receives the output gradient and returns one gradient (or
    ``None``) per input, in order.
    """
    inputs = tuple(inputs)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    if _GRAD_ENABLED and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, backward, saved)
    return out


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` (inverse of broadcasting)."""
    if grad.shape == shape:
        return grad
    lead = grad.ndim - len(shape)
    if lead:
        grad = grad.sum(axis=tuple(range(lead)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise DimensionError(f"shapes {a} and {b} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(x: Tensor, y) -> Tensor:
    y = as_tensor(y, like=x)
    _broadcast_shape(x.shape, y.shape)
    xs, ys = x.shape, y.shape
    return record(
        "add", x.data + y.data, (x, y),
        lambda g: (unbroadcast(g, xs), unbroadcast(g, ys)),
    )


def mul(x: Tensor, y) -> Tensor:
    if isinstance(y, (int, float)):
        c = y
        return record("mul_scalar", x.data * x.dtype.type(c), (x,), lambda g: (g * c,))
    y = as_tensor(y, like=x)
    _broadcast_shape(x.shape, y.shape)
    xd, yd = x.data, y.data

    def backward(g):
        return (
            unbroadcast(g * yd, xd.shape) if x.requires_grad else None,
            unbroadcast(g * xd, yd.shape) if y.requires_grad else None,
        )

    return record("mul", xd * yd, (x, y), backward)


def neg(x: Tensor) -> Tensor:
    return record("neg", -x.data, (x,), lambda g: (-g,))


def reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return record("reciprocal", out, (x,), lambda g: (-g * out * out,))


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return record("exp", out, (x,), lambda g: (g * out,))


def log(x: Tensor) -> Tensor:
    xd = x.data
    return record("log", np.log(xd), (x,), lambda g: (g / xd,))


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return record("sqrt", out, (x,), lambda g: (g * 0.5 / out,))


def square(x: Tensor) -> Tensor:
    xd = x.data
    return record("square", xd * xd, (x,), lambda g: (2.0 * g * xd,))


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return record("relu", np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    out = _sigmoid(x.data)
    return record("sigmoid", out, (x,), lambda g: (g * out * (1 - out),))


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(a)
    pos = a >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    e = np.exp(a[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = _sigmoid(xd)
    return record("silu", xd * s, (x,), lambda g: (g * (s * (1 + xd * (1 - s))),))


def softplus(x: Tensor) -> Tensor:
    xd = x.data
    return record("softplus", np.logaddexp(0, xd).astype(xd.dtype), (x,), lambda g: (g * _sigmoid(xd),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    xd = x.data
    inner = _GELU_C * (xd + 0.044715 * xd**3)
    t = np.tanh(inner)
    out = 0.5 * xd * (1 + t)

    def backward(g):
        dinner = _GELU_C * (1 + 3 * 0.044715 * xd**2)
        return (g * (0.5 * (1 + t) + 0.5 * xd * (1 - t * t) * dinner),)

    return record("gelu", out, (x,), backward)


def activation(x: Tensor, fn: str) -> Tensor:
    try:
        return _ACTIVATIONS[fn](x)
    except KeyError:
        raise ContractError(f"unknown activation {fn!r}") from None


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "silu": silu, "gelu": gelu, "softplus": softplus}


def elementwise(x: Tensor, y, op: str) -> Tensor:
    if op == "add":
        return add(x, y)
    if op == "mul":
        return mul(x, y)
    raise ContractError(f"unknown elementwise op {op!r}")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product; leading axes broadcast like NumPy."""
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise DimensionError(f"matmul batch extents disagree: {a.shape} @ {b.shape}") from None
    ad, bd = a.data, b.data

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape)
        if b.requires_grad:
            gb = unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape)
        return ga, gb

    return record("matmul", ad @ bd, (a, b), backward)


# ---------------------------------------------------------------------------
# reductions and normalizations
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    out = []
    for a in axis:
        if not -ndim <= a < ndim:
            raise DimensionError(f"axis {a} out of range for rank {ndim}")
        out.append(a % ndim)
    return tuple(sorted(set(out)))


def reduce(x: Tensor, axis=None, mode: str = "sum", keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))
    count = int(np.prod([shape[i] for i in axes])) if axes else 1
    if count == 0:
        raise DimensionError(f"cannot reduce a zero extent of shape {shape}")
    out_shape = kept if keepdims else tuple(n for i, n in enumerate(shape) if i not in axes)

    if mode == "sum":
        out = x.data.sum(axis=axes, keepdims=True)
        back = lambda g: (np.broadcast_to(g.reshape(kept), shape).copy(),)
    elif mode == "mean":
        out = x.data.mean(axis=axes, keepdims=True, dtype=np.float64).astype(x.dtype)
        back = lambda g: (np.broadcast_to(g.reshape(kept) / count, shape).copy(),)
    elif mode == "max":
        out, back = _max_reduce(x.data, axes, kept)
    else:
        raise ContractError(f"unknown reduce mode {mode!r}")
    return record(f"reduce_{mode}", out.reshape(out_shape), (x,), back)


def _max_reduce(xd: np.ndarray, axes: tuple[int, ...], kept: tuple[int, ...]):
    rest = tuple(i for i in range(xd.ndim) if i not in axes)
    moved = np.transpose(xd, rest + axes)
    flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
    # np.argmax returns the first maximal index in row-major scan order
    idx = np.argmax(flat, axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0].reshape(kept)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape)[..., None], axis=-1)
        inv = np.argsort(rest + axes)
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return out, backward


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    if x.shape[axis] == 0:
        raise DimensionError("softmax over an empty axis")
    xd = x.data
    e = np.exp(xd - xd.max(axis=axis, keepdims=True))
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record("softmax", out, (x,), backward)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axes(axis, x.ndim)[0]
    xd = x.data
    shifted = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", out, (x,), backward)


def layer_norm(x: Tensor, weight: Tensor | None, bias: Tensor | None,
               axis: int = -1, eps: float = 1e-5) -> Tensor:
    """Standardize along one axis, then apply a per-element affine map."""
    axis = _norm_axes(axis, x.ndim)[0]
    n = x.shape[axis]
    if weight is not None and weight.shape != (n,):
        raise DimensionError(f"layer norm extent {n} does not match parameter shape {weight.shape}")
    bshape = [1] * x.ndim
    bshape[axis] = n
    xd = x.data
    mu = xd.mean(axis=axis, keepdims=True)
    xc = xd - mu
    xc = xc - xc.mean(axis=axis, keepdims=True)  # second pass removes float32 rounding in mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat
    if weight is not None:
        out = xhat * weight.data.reshape(bshape)
    if bias is not None:
        out = out + bias.data.reshape(bshape)
    red = tuple(i for i in range(x.ndim) if i != axis)

    def backward(g):
        dxhat = g * weight.data.reshape(bshape) if weight is not None else g
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axis, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True)
        )
        dw = (g * xhat).sum(axis=red) if weight is not None else None
        db = g.sum(axis=red) if bias is not None else None
        return dx, dw, db

    inputs = (x, weight if weight is not None else _NONE, bias if bias is not None else _NONE)
    return record("layer_norm", out.astype(xd.dtype, copy=False), inputs, backward)


_NONE = Tensor(0.0)


# ---------------------------------------------------------------------------
# shape manipulation
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    xs = x.shape
    return record("reshape", out, (x,), lambda g: (g.reshape(xs),))


def permute(x: Tensor, axes) -> Tensor:
    axes = tuple(axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return record("permute", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def swapaxes(x: Tensor, a: int, b: int) -> Tensor:
    axes = list(range(x.ndim))
    axes[a], axes[b] = axes[b], axes[a]
    return permute(x, axes)


def getitem(x: Tensor, index) -> Tensor:
    out = x.data[index]
    xs, dt = x.shape, x.dtype

    def backward(g):
        full = np.zeros(xs, dtype=dt)
        np.add.at(full, index, g) if _has_advanced(index) else full.__setitem__(index, g)
        return (full,)

    return record("getitem", out, (x,), backward)


def _has_advanced(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return any(isinstance(i, (list, np.ndarray, Tensor)) for i in items)


def flip(x: Tensor, axis: int) -> Tensor:
    return record("flip", np.flip(x.data, axis), (x,), lambda g: (np.flip(g, axis),))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    ndim = tensors[0].ndim
    axis = _norm_axes(axis, ndim)[0]
    for t in tensors[1:]:
        if t.ndim != ndim or any(
            a != b for i, (a, b) in enumerate(zip(t.shape, tensors[0].shape)) if i != axis
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {tensors[0].shape} and {t.shape} disagree"
            )
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        sl = [slice(None)] * g.ndim
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    return record("concat", np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    expanded = [reshape(t, t.shape[:axis] + (1,) + t.shape[axis:]) for t in tensors]
    return concat(expanded, axis=axis)


def pad2d(x: Tensor, pad: int | tuple[int, int]) -> Tensor:
    """Zero-pad the last two axes."""
    ph, pw = (pad, pad) if isinstance(pad, int) else pad
    if ph == 0 and pw == 0:
        return x
    width = [(0, 0)] * (x.ndim - 2) + [(ph, ph), (pw, pw)]
    H, W = x.shape[-2:]
    return record(
        "pad2d", np.pad(x.data, width), (x,),
        lambda g: (g[..., ph:ph + H, pw:pw + W],),
    )


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat every pixel of the last two axes ``factor`` times."""
    B = x.shape[:-2]
    H, W = x.shape[-2:]
    out = np.repeat(np.repeat(x.data, factor, axis=-2), factor, axis=-1)

    def backward(g):
        return (g.reshape(B + (H, factor, W, factor)).sum(axis=(-3, -1)),)

    return record("upsample_nearest", out, (x,), backward)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def ones(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_DEFAULT_DTYPE), requires_grad=requires_grad)


def broadcast_to(x: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast {x.shape} to {shape}") from None
    xs = x.shape
    return record("broadcast_to", np.ascontiguousarray(out), (x,), lambda g: (unbroadcast(g, xs),))
