"""Toy windowed-attention encoder standing in for the SAM2 Hiera trunk.

Attention is computed only inside non-overlapping ``w x w`` windows with a
learned absolute position embedding shared by every window, and no relative
position bias. Blocks carry two optional adapters: the refiner on the
attention output and an MLP-Adapter parallel to the MLP.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, LayerNorm, Linear, Module, Parameter
from .refiner import MlpAdapter, MlpAdapterConfig, Refiner, RefinerConfig
from .tensor import Tensor


@dataclass(frozen=True)
class HieraStageConfig:
    channels: int
    blocks: int = 2
    window: int = 4
    heads: int = 1
    out_channels: int | None = None
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.channels % self.heads:
            raise ConfigurationError(
                f"head count {self.heads} does not divide channels {self.channels}"
            )

    def check_extent(self, H: int, W: int) -> None:
        if H % self.window or W % self.window:
            raise ConfigurationError(f"window {self.window} does not divide extent {H}x{W}")


@dataclass(frozen=True)
class AdapterSwitches:
    refiner: bool = True
    channel_attn: bool = True
    mlp_adapter: bool = True
    refiner_ratio: float = 0.25
    adapter_ratio: float = 0.25
    adapter_scale: float = 0.5


def window_partition(x: Tensor, w: int, channels_last: bool = False) -> Tensor:
    """(B, C, H, W) -> (B * H/w * W/w, w*w, C), windows in row-major order."""
    if not channels_last:
        x = T.permute(x, (0, 2, 3, 1))
    B, H, W, C = x.shape
    if H % w or W % w:
        raise ConfigurationError(f"window {w} does not divide extent {H}x{W}")
    t = T.reshape(x, (B, H // w, w, W // w, w, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    return T.reshape(t, (B * (H // w) * (W // w), w * w, C))


def window_unpartition(tokens: Tensor, w: int, H: int, W: int, channels_last: bool = False) -> Tensor:
    nb, _, C = tokens.shape
    B = nb // ((H // w) * (W // w))
    t = T.reshape(tokens, (B, H // w, W // w, w, w, C))
    t = T.permute(t, (0, 1, 3, 2, 4, 5))
    x = T.reshape(t, (B, H, W, C))
    return x if channels_last else T.permute(x, (0, 3, 1, 2))


class WindowAttention(Module):
    def __init__(self, channels: int, heads: int, window: int):
        if channels % heads:
            raise ConfigurationError(f"head count {heads} does not divide channels {channels}")
        self.channels, self.heads, self.window = channels, heads, window
        self.pos = Parameter(np.zeros((window * window, channels)))
        self.qkv = Linear(channels, 3 * channels)
        self.proj = Linear(channels, channels)
        self.last_weights: np.ndarray | None = None

    def reset_parameters(self, rng):
        self.pos.data = (rng.standard_normal(self.pos.shape) * 0.02).astype(self.pos.dtype)

    def forward(self, tokens: Tensor) -> Tensor:
        nb, n, C = tokens.shape
        if C != self.channels or n != self.window**2:
            raise ConfigurationError(
                f"window attention expects (*, {self.window**2}, {self.channels}), got {tokens.shape}"
            )
        h, dh = self.heads, C // self.heads
        qkv = self.qkv(tokens + self.pos)
        qkv = T.permute(T.reshape(qkv, (nb, n, 3, h, dh)), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        scores = T.matmul(q, T.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(dh))
        weights = T.softmax(scores, axis=-1)
        self.last_weights = weights.data
        out = T.matmul(weights, v)  # (nb, h, n, dh)
        out = T.reshape(T.permute(out, (0, 2, 1, 3)), (nb, n, C))
        return self.proj(out)


def window_attention_forward(attn: WindowAttention, tokens: Tensor) -> Tensor:
    return attn(tokens)


class Mlp(Module):
    def __init__(self, channels: int, ratio: int):
        self.fc1 = Linear(channels, ratio * channels)
        self.fc2 = Linear(ratio * channels, channels)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(T.gelu(self.fc1(x)))


class HieraBlock(Module):
    """Channels-last block: attention (+refiner) then MLP (+parallel adapter)."""

    def __init__(self, cfg: HieraStageConfig, adapters: AdapterSwitches):
        C = cfg.channels
        self.cfg = cfg
        self.norm1 = LayerNorm(C)
        self.attn = WindowAttention(C, cfg.heads, cfg.window)
        self.refiner = (
            Refiner(RefinerConfig(C, adapters.refiner_ratio, channel_attn=adapters.channel_attn))
            if adapters.refiner else None
        )
        self.norm2 = LayerNorm(C)
        self.mlp = Mlp(C, cfg.mlp_ratio)
        self.mlp_adapter = (
            MlpAdapter(MlpAdapterConfig(C, adapters.adapter_ratio, adapters.adapter_scale))
            if adapters.mlp_adapter else None
        )

    def forward(self, x: Tensor) -> Tensor:
        B, H, W, C = x.shape
        w = self.cfg.window
        tokens = window_partition(self.norm1(x), w, channels_last=True)
        a = window_unpartition(self.attn(tokens), w, H, W, channels_last=True)
        if self.refiner is not None:
            a = self.refiner(a)
        x = x + a
        h = self.norm2(x)
        m = self.mlp(h)
        if self.mlp_adapter is not None:
            m = m + self.mlp_adapter.delta(h)
        return x + m


class HieraStage(Module):
    def __init__(self, cfg: HieraStageConfig, adapters: AdapterSwitches = AdapterSwitches()):
        self.cfg = cfg
        self.blocks = [HieraBlock(cfg, adapters) for _ in range(cfg.blocks)]
        out = cfg.out_channels or 2 * cfg.channels
        self.downsample = Conv2d(cfg.channels, out, 2, stride=2)

    def forward_with_skip(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(B, C, H, W) -> (features at H x W, downsampled features at H/2 x W/2)."""
        B, C, H, W = x.shape
        if C != self.cfg.channels:
            raise DimensionError(f"stage expects {self.cfg.channels} channels, got {x.shape}")
        self.cfg.check_extent(H, W)
        h = T.permute(x, (0, 2, 3, 1))
        for blk in self.blocks:
            h = blk(h)
        feats = T.permute(h, (0, 3, 1, 2))
        return feats, self.downsample(feats)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_skip(x)[1]


def hiera_stage_forward(stage: HieraStage, x: Tensor) -> Tensor:
    return stage(x)


def is_adapter_parameter(name: str) -> bool:
    return ".refiner." in f".{name}" or ".mlp_adapter." in f".{name}"
