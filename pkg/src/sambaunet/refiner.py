"""Dynamic Feature Fusion Refiner and the parallel MLP-Adapter.

Both adapters act on channels-last feature maps ``(B, H, W, C)``, the layout
the windowed-attention branch produces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, ConvTranspose2d, LayerNorm, Linear, Module, Parameter, _uniform
from .tensor import Tensor


@dataclass(frozen=True)
class RefinerConfig:
    channels: int
    ratio: float = 0.25
    kernel: int = 3
    conv_bias: bool = True
    channel_attn: bool = True
    eps: float = 1e-5

    def __post_init__(self):
        if not 0 < self.ratio <= 1:
            raise ConfigurationError(f"compression ratio must lie in (0, 1], got {self.ratio}")
        if self.bottleneck < 1:
            raise ConfigurationError(
                f"bottleneck floor({self.channels}*{self.ratio}) must be >= 1"
            )

    @property
    def bottleneck(self) -> int:
        return math.floor(self.channels * self.ratio)

    def parameter_count(self) -> int:
        C, h, k = self.channels, self.bottleneck, self.kernel
        gate = 2 * C * h + h * C if self.channel_attn else 0
        conv = Conv2d.count(C, C, k, self.conv_bias)
        deconv = ConvTranspose2d.count(C, C, k, self.conv_bias)
        return gate + conv + deconv + LayerNorm.count(C)


@dataclass(frozen=True)
class MlpAdapterConfig:
    channels: int
    ratio: float = 0.25
    scale: float = 0.5

    def __post_init__(self):
        if self.bottleneck < 1:
            raise ConfigurationError("MLP-Adapter bottleneck must be >= 1")
        if not 0 <= self.scale <= 1:
            raise ConfigurationError(f"residual scale must lie in [0, 1], got {self.scale}")

    @property
    def bottleneck(self) -> int:
        return max(1, math.floor(self.channels * self.ratio))

    def parameter_count(self) -> int:
        C, h = self.channels, self.bottleneck
        return C * h + h + h * C + C


def channel_descriptor(x: Tensor) -> Tensor:
    """Concatenate global average and global max pooling: (B, H, W, C) -> (B, 2C)."""
    if x.ndim != 4:
        raise DimensionError(f"channel_descriptor expects rank 4 (B, H, W, C), got {x.shape}")
    avg = T.reduce(x, (1, 2), "mean")
    mx = T.reduce(x, (1, 2), "max")
    return T.concat([avg, mx], axis=1)


def channel_gate(desc: Tensor, x: Tensor, w1: Tensor, w2: Tensor) -> Tensor:
    """Scale channels-last ``x`` by sigma(W2 relu(W1 desc))."""
    C = x.shape[-1]
    if desc.shape[-1] != 2 * C or w2.shape[0] != C:
        raise DimensionError(
            f"channel gate: descriptor {desc.shape} / W2 {w2.shape} do not match {C} channels"
        )
    hidden = T.relu(T.matmul(desc, T.permute(w1, (1, 0))))
    gate = T.sigmoid(T.matmul(hidden, T.permute(w2, (1, 0))))
    B = x.shape[0]
    return x * T.reshape(gate, (B, 1, 1, C))


class Refiner(Module):
    def __init__(self, cfg: RefinerConfig):
        self.cfg = cfg
        C, h, k = cfg.channels, cfg.bottleneck, cfg.kernel
        if cfg.channel_attn:
            self.w1 = Parameter(np.zeros((h, 2 * C)))
            self.w2 = Parameter(np.zeros((C, h)))
        else:
            self.w1 = self.w2 = None
        pad = k // 2
        self.down = Conv2d(C, C, k, stride=2, padding=pad, bias=cfg.conv_bias)
        self.up = ConvTranspose2d(C, C, k, stride=2, padding=pad, output_padding=1,
                                  bias=cfg.conv_bias)
        self.norm = LayerNorm(C, eps=cfg.eps)
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        if self.w1 is not None:
            self.w1.data = _uniform(rng, self.w1.shape, self.w1.shape[1])
            self.w2.data = _uniform(rng, self.w2.shape, self.w2.shape[1])

    def gated(self, x: Tensor) -> Tensor:
        if self.w1 is None:
            return x
        return channel_gate(channel_descriptor(x), x, self.w1, self.w2)

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        if C != self.cfg.channels:
            raise DimensionError(f"refiner expects {self.cfg.channels} channels, got {x.shape}")
        if H % 2 or W % 2:
            raise ConfigurationError(f"refiner needs even spatial extents, got {H}x{W}")
        gated = self.gated(x)
        g = T.permute(gated, (0, 3, 1, 2))
        spatial = T.relu(self.up(T.relu(self.down(g))))
        return self.norm(gated + T.permute(spatial, (0, 2, 3, 1)) + x)


def refiner_forward(refiner: Refiner, x: Tensor) -> Tensor:
    return refiner(x)


class MlpAdapter(Module):
    """``x + s * up(gelu(down(x)))`` over the channel axis."""

    def __init__(self, cfg: MlpAdapterConfig):
        self.cfg = cfg
        self.down = Linear(cfg.channels, cfg.bottleneck)
        self.up = Linear(cfg.bottleneck, cfg.channels)

    def delta(self, x: Tensor) -> Tensor:
        return self.up(T.gelu(self.down(x))) * self.cfg.scale

    def forward(self, x: Tensor) -> Tensor:
        return x + self.delta(x)


def mlp_adapter_forward(adapter: MlpAdapter, x: Tensor) -> Tensor:
    return adapter(x)
