"""Parameterized layers and their differentiable kernels.

Convolutions use cross-correlation semantics (no kernel flip) and are lowered
to a single matrix product over im2col windows.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Iterator

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError
from .tensor import Tensor, record


class Parameter(Tensor):
    """A leaf tensor that an optimizer may update."""

    def __init__(self, data, trainable: bool = True):
        super().__init__(data, requires_grad=True)
        self.trainable = trainable


class Module:
    """Minimal container that discovers parameters and submodules by attribute."""

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")
                    elif isinstance(item, Parameter):
                        yield f"{full}.{i}", item

    def modules(self) -> Iterator["Module"]:
        yield self
        for value in vars(self).values():
            if isinstance(value, Module):
                yield from value.modules()
            elif isinstance(value, (list, tuple)):
                for item in value:
                    if isinstance(item, Module):
                        yield from item.modules()

    def num_parameters(self, trainable_only: bool = False) -> int:
        return sum(
            p.size for p in self.parameters() if p.trainable or not trainable_only
        )

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state: dict) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise ConfigurationError(
                f"state mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}"
            )
        for name, p in own.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise DimensionError(f"{name}: stored shape {value.shape} != {p.shape}")
            p.data = value.astype(p.dtype, copy=True)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def init_parameters(self, seed: int) -> None:
        """Re-initialize every owned layer from a single seed."""
        rng = np.random.default_rng(seed)
        for m in self.modules():
            if hasattr(m, "reset_parameters"):
                m.reset_parameters(rng)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = math.sqrt(1.0 / fan_in)
    return rng.uniform(-a, a, size=shape).astype(T.get_default_dtype())


def init_parameters(layer: Module, seed: int) -> None:
    """Draw weights from U(-a, a), a = sqrt(1/fan_in), and zero the biases."""
    layer.init_parameters(seed)


def _pair(v) -> tuple[int, int]:
    return (v, v) if isinstance(v, int) else tuple(v)


# ---------------------------------------------------------------------------
# convolution kernels
# ---------------------------------------------------------------------------

def conv_output_extent(n: int, k: int, stride: int, pad: int) -> int:
    return (n + 2 * pad - k) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    if x.ndim != 4:
        raise DimensionError(f"conv2d expects (B, C, H, W), got {x.shape}")
    B, Ci, H, W = x.shape
    Co, Ci_w, kh, kw = weight.shape
    if Ci != Ci_w:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape}, weight {weight.shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    Ho = conv_output_extent(H, kh, sh, ph)
    Wo = conv_output_extent(W, kw, sw, pw)
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(
            f"conv2d output extent {Ho}x{Wo} < 1 for input {H}x{W}, kernel {kh}x{kw}"
        )
    wd = weight.data
    if kh == kw == 1 and sh == sw == 1 and ph == pw == 0:
        return _pointwise(x, weight, bias)

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :Ho, :Wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, Ci * kh * kw)
    wmat = wd.reshape(Co, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(B, Ho, Wo, Co).transpose(0, 3, 1, 2)

    def backward(g):
        gr = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, Co)
        gw = (gr.T @ cols).reshape(wd.shape) if weight.requires_grad else None
        gb = gr.sum(axis=0) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (gr @ wmat).reshape(B, Ho, Wo, Ci, kh, kw)
            gxp = np.zeros(xp.shape, dtype=xp.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += dcols[..., i, j].transpose(0, 3, 1, 2)
            gx = gxp[:, :, ph:ph + H, pw:pw + W]
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv2d", np.ascontiguousarray(out), inputs, backward)


def _pointwise(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    B, Ci, H, W = x.shape
    Co = weight.shape[0]
    wmat = weight.data.reshape(Co, Ci)
    xr = x.data.reshape(B, Ci, H * W)
    out = wmat @ xr
    if bias is not None:
        out += bias.data[:, None]

    def backward(g):
        gr = g.reshape(B, Co, H * W)
        gx = (wmat.T @ gr).reshape(x.shape) if x.requires_grad else None
        gw = None
        if weight.requires_grad:
            gw = np.einsum("bon,bin->oi", gr, xr).reshape(weight.shape)
        gb = gr.sum(axis=(0, 2)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv2d_1x1", out.reshape(B, Co, H, W), inputs, backward)


def conv_transpose2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                     stride: int = 1, padding: int = 0, output_padding: int = 0) -> Tensor:
    """Transposed convolution; ``weight`` is (C_in, C_out, k_h, k_w)."""
    if x.ndim != 4:
        raise DimensionError(f"conv_transpose2d expects (B, C, H, W), got {x.shape}")
    B, Ci, H, W = x.shape
    Ci_w, Co, kh, kw = weight.shape
    if Ci != Ci_w:
        raise DimensionError(
            f"conv_transpose2d channel mismatch: input {x.shape}, weight {weight.shape}"
        )
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oph, opw = _pair(output_padding)
    Ho = (H - 1) * sh - 2 * ph + kh + oph
    Wo = (W - 1) * sw - 2 * pw + kw + opw
    if Ho < 1 or Wo < 1:
        raise ConfigurationError(f"conv_transpose2d output extent {Ho}x{Wo} < 1")
    wd = weight.data
    wmat = wd.reshape(Ci, Co * kh * kw)
    xr = x.data.transpose(0, 2, 3, 1).reshape(B * H * W, Ci)
    cols = (xr @ wmat).reshape(B, H, W, Co, kh, kw)
    full_h = (H - 1) * sh + kh + oph
    full_w = (W - 1) * sw + kw + opw
    full = np.zeros((B, Co, full_h, full_w), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            full[:, :, i:i + sh * H:sh, j:j + sw * W:sw] += cols[..., i, j].transpose(0, 3, 1, 2)
    out = full[:, :, ph:ph + Ho, pw:pw + Wo]
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def backward(g):
        gfull = np.zeros((B, Co, full_h, full_w), dtype=g.dtype)
        gfull[:, :, ph:ph + Ho, pw:pw + Wo] = g
        dcols = np.empty((B, H, W, Co, kh, kw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                dcols[..., i, j] = gfull[:, :, i:i + sh * H:sh, j:j + sw * W:sw].transpose(0, 2, 3, 1)
        dr = dcols.reshape(B * H * W, Co * kh * kw)
        gx = (dr @ wmat.T).reshape(B, H, W, Ci).transpose(0, 3, 1, 2) if x.requires_grad else None
        gw = (xr.T @ dr).reshape(wd.shape) if weight.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("conv_transpose2d", np.ascontiguousarray(out), inputs, backward)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Per-channel 'same' convolution; ``weight`` is (C, k, k) with odd k."""
    B, C, H, W = x.shape
    Cw, k, k2 = weight.shape
    if Cw != C or k != k2 or k % 2 == 0:
        raise DimensionError(f"depthwise weight {weight.shape} incompatible with input {x.shape}")
    p = k // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p)))
    wd = weight.data
    out = np.zeros(x.shape, dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            out += xp[:, :, i:i + H, j:j + W] * wd[None, :, i, j, None, None]
    if bias is not None:
        out += bias.data[None, :, None, None]

    def backward(g):
        gw = np.empty_like(wd) if weight.requires_grad else None
        gxp = np.zeros_like(xp) if x.requires_grad else None
        for i in range(k):
            for j in range(k):
                if gw is not None:
                    gw[:, i, j] = (g * xp[:, :, i:i + H, j:j + W]).sum(axis=(0, 2, 3))
                if gxp is not None:
                    gxp[:, :, i:i + H, j:j + W] += g * wd[None, :, i, j, None, None]
        gx = gxp[:, :, p:p + H, p:p + W] if gxp is not None else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    inputs = (x, weight) + ((bias,) if bias is not None else ())
    return record("depthwise_conv2d", out, inputs, backward)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool2d(x: Tensor, mode: str = "max", kernel: int | None = None, stride: int | None = None,
           output_size: tuple[int, int] | int | None = None) -> Tensor:
    """Windowed (``kernel``/``stride``) or adaptive (``output_size``) pooling."""
    if mode not in ("max", "avg"):
        raise ContractError(f"unknown pooling mode {mode!r}")
    if output_size is not None:
        return adaptive_pool2d(x, mode, output_size)
    if kernel is None:
        raise ContractError("pool2d needs either kernel or output_size")
    return _window_pool(x, mode, kernel, stride or kernel)


def _window_pool(x: Tensor, mode: str, k: int, s: int) -> Tensor:
    B, C, H, W = x.shape
    if k > H or k > W:
        raise DimensionError(f"pool kernel {k} exceeds spatial extent {H}x{W}")
    Ho, Wo = (H - k) // s + 1, (W - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    if mode == "avg":
        out = flat.mean(axis=-1)

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            share = g / (k * k)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += share
            return (gx,)
    else:
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]

        def backward(g):
            gx = np.zeros(x.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    gx[:, :, i:i + s * Ho:s, j:j + s * Wo:s] += g * (idx == i * k + j)
            return (gx,)

    return record(f"{mode}_pool2d", np.ascontiguousarray(out), (x,), backward)


def _bins(n_in: int, n_out: int) -> list[tuple[int, int]]:
    return [(i * n_in // n_out, -(-(i + 1) * n_in // n_out)) for i in range(n_out)]


def adaptive_pool2d(x: Tensor, mode: str, output_size) -> Tensor:
    oh, ow = _pair(output_size)
    B, C, H, W = x.shape
    if oh > H or ow > W or oh < 1 or ow < 1:
        raise DimensionError(f"adaptive pool target {oh}x{ow} exceeds source {H}x{W}")
    if (oh, ow) == (1, 1):
        op = "mean" if mode == "avg" else "max"
        return T.reduce(x, (2, 3), op, keepdims=True)
    rows, cols = [], []
    for r0, r1 in _bins(H, oh):
        row = []
        for c0, c1 in _bins(W, ow):
            region = x[:, :, r0:r1, c0:c1]
            row.append(T.reduce(region, (2, 3), "mean" if mode == "avg" else "max", keepdims=True))
        rows.append(T.concat(row, axis=3))
    return T.concat(rows, axis=2)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Conv2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 bias: bool = True):
        if min(in_ch, out_ch, kernel, stride) < 1 or padding < 0:
            raise ConfigurationError(
                f"invalid Conv2d({in_ch}, {out_ch}, k={kernel}, s={stride}, p={padding})"
            )
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding = stride, padding
        self.weight = Parameter(np.zeros((out_ch, in_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        self.weight.data = _uniform(rng, self.weight.shape, self.in_ch * self.kernel**2)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def output_extent(self, n: int) -> int:
        return conv_output_extent(n, self.kernel, self.stride, self.padding)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.weight, self.bias, self.stride, self.padding)

    @staticmethod
    def count(in_ch, out_ch, kernel, bias=True) -> int:
        return out_ch * in_ch * kernel * kernel + (out_ch if bias else 0)


def conv2d_forward(layer: Conv2d, x: Tensor) -> Tensor:
    return layer(x)


class ConvTranspose2d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, padding: int = 0,
                 output_padding: int = 0, bias: bool = True):
        if output_padding >= max(stride, 1) and output_padding > 0:
            raise ConfigurationError("output_padding must be smaller than stride")
        self.in_ch, self.out_ch, self.kernel = in_ch, out_ch, kernel
        self.stride, self.padding, self.output_padding = stride, padding, output_padding
        self.weight = Parameter(np.zeros((in_ch, out_ch, kernel, kernel)))
        self.bias = Parameter(np.zeros(out_ch)) if bias else None
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        # fan_in seen by each output pixel
        self.weight.data = _uniform(rng, self.weight.shape, self.out_ch * self.kernel**2)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def output_extent(self, n: int) -> int:
        return (n - 1) * self.stride - 2 * self.padding + self.kernel + self.output_padding

    def forward(self, x: Tensor) -> Tensor:
        return conv_transpose2d(x, self.weight, self.bias, self.stride, self.padding,
                                self.output_padding)

    @staticmethod
    def count(in_ch, out_ch, kernel, bias=True) -> int:
        return in_ch * out_ch * kernel * kernel + (out_ch if bias else 0)


class DepthwiseConv2d(Module):
    def __init__(self, channels: int, kernel: int = 3, bias: bool = True):
        if kernel % 2 == 0:
            raise ConfigurationError(f"depthwise kernel must be odd, got {kernel}")
        self.channels, self.kernel = channels, kernel
        self.weight = Parameter(np.zeros((channels, kernel, kernel)))
        self.bias = Parameter(np.zeros(channels)) if bias else None
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        self.weight.data = _uniform(rng, self.weight.shape, self.kernel**2)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        return depthwise_conv2d(x, self.weight, self.bias)


class Linear(Module):
    """``y = x W^T + b`` over the last axis."""

    def __init__(self, in_features: int, out_features: int, bias: bool = True):
        self.in_features, self.out_features = in_features, out_features
        self.weight = Parameter(np.zeros((out_features, in_features)))
        self.bias = Parameter(np.zeros(out_features)) if bias else None
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        self.weight.data = _uniform(rng, self.weight.shape, self.in_features)
        if self.bias is not None:
            self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"Linear expects last extent {self.in_features}, got {x.shape}")
        y = T.matmul(x, T.permute(self.weight, (1, 0)))
        return y + self.bias if self.bias is not None else y

    @staticmethod
    def count(in_features, out_features, bias=True) -> int:
        return in_features * out_features + (out_features if bias else 0)


class LayerNorm(Module):
    def __init__(self, extent: int, eps: float = 1e-5, axis: int = -1):
        self.extent, self.eps, self.axis = extent, eps, axis
        self.weight = Parameter(np.ones(extent))
        self.bias = Parameter(np.zeros(extent))

    def reset_parameters(self, rng):
        self.weight.data = np.ones_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[self.axis] != self.extent:
            raise DimensionError(
                f"LayerNorm over axis {self.axis} expects extent {self.extent}, got {x.shape}"
            )
        return T.layer_norm(x, self.weight, self.bias, axis=self.axis, eps=self.eps)

    @staticmethod
    def count(extent) -> int:
        return 2 * extent


def layer_norm_forward(layer: LayerNorm, x: Tensor) -> Tensor:
    return layer(x)


class GroupNorm1(Module):
    """Per-sample standardization over (C, H, W) with per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-5):
        self.channels, self.eps = channels, eps
        self.weight = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))

    def reset_parameters(self, rng):
        self.weight.data = np.ones_like(self.weight.data)
        self.bias.data = np.zeros_like(self.bias.data)

    def forward(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        flat = T.reshape(x, (B, C * H * W))
        normed = T.reshape(T.layer_norm(flat, None, None, axis=-1, eps=self.eps), x.shape)
        w = T.reshape(self.weight, (1, C, 1, 1))
        b = T.reshape(self.bias, (1, C, 1, 1))
        return normed * w + b
