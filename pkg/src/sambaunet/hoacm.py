"""Heterogeneous Omni-Attention Convergence Module.

``BSEA`` gates the state-space branch with a pooled channel-affinity
attention turned into a spatial softmax map; ``OCA`` gates the windowed
attention branch with a global-context spatial gate; ``HOACM`` fuses both
into the decoder skip for one stage.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .layers import Conv2d, GroupNorm1, LayerNorm, Module, Parameter, pool2d
from .tensor import Tensor

FUSE_MODES = ("conv", "sum")


class BSEA(Module):
    """Bifurcated avg/max pooled attention producing a spatial gate.

    ``q``, ``k`` and ``v`` are shared by both pooling paths. ``gamma`` rescales
    the spatial softmax map and starts at ``H * W`` so that a spatially
    constant input passes through unchanged at initialization.
    """

    def __init__(self, channels: int, spatial: tuple[int, int] = (8, 8), adapt_attn: bool = True,
                 pool: int = 2):
        self.channels, self.spatial, self.pool = channels, tuple(spatial), pool
        if adapt_attn:
            self.q = Conv2d(channels, channels, 1)
            self.k = Conv2d(channels, channels, 1)
            self.v = Conv2d(channels, channels, 1)
        else:
            self.q = self.k = self.v = None
        self.gamma = Parameter(np.array([float(spatial[0] * spatial[1])]))
        self.last_affinity: list[np.ndarray] = []

    def reset_parameters(self, rng):
        self.gamma.data = np.array([float(self.spatial[0] * self.spatial[1])], dtype=self.gamma.dtype)

    def _attend(self, p: Tensor) -> Tensor:
        if self.q is None:
            return p
        B, C, h, w = p.shape
        Q = T.reshape(self.q(p), (B, C, h * w))
        K = T.reshape(self.k(p), (B, C, h * w))
        V = T.reshape(self.v(p), (B, C, h * w))
        M = T.softmax(T.matmul(Q, T.swapaxes(K, 1, 2)), axis=-1)  # (B, C, C)
        self.last_affinity.append(M.data)
        return T.reshape(T.matmul(M, V), (B, C, h, w))

    def attention_map(self, x: Tensor) -> Tensor:
        """Spatial softmax map (B, C, H, W); sums to 1 over H*W per channel."""
        B, C, H, W = x.shape
        if C != self.channels:
            raise DimensionError(f"BSEA expects {self.channels} channels, got {x.shape}")
        if H % self.pool or W % self.pool:
            raise ConfigurationError(f"BSEA needs extents divisible by {self.pool}, got {H}x{W}")
        self.last_affinity = []
        x_avg = pool2d(x, "avg", self.pool)
        x_max = pool2d(x, "max", self.pool)
        s = self._attend(x_avg) + self._attend(x_max)
        up = T.upsample_nearest(s, self.pool)
        return T.reshape(T.softmax(T.reshape(up, (B, C, H * W)), axis=-1), (B, C, H, W))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.attention_map(x) * T.reshape(self.gamma, (1, 1, 1, 1))


def bsea_forward(module: BSEA, x: Tensor) -> Tensor:
    return module(x)


class OCA(Module):
    """Channel max/mean compression, global-context enhancement, cascaded 7x7 gates."""

    def __init__(self, gcaa: bool = True, kernel: int = 7):
        pad = kernel // 2
        self.gsa = Conv2d(2, 2, kernel, padding=pad) if gcaa else None
        self.basic = Conv2d(2, 1, kernel, padding=pad, bias=False)
        self.basic_norm = GroupNorm1(1)

    def descriptors(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """Return (X_cat, X_global), each (B, 2, H, W)."""
        x_max = T.reduce(x, 1, "max", keepdims=True)
        x_avg = T.reduce(x, 1, "mean", keepdims=True)
        x_cat = T.concat([x_max, x_avg], axis=1)
        x_global = T.reduce(x_cat, (2, 3), "mean", keepdims=True) * x_cat
        return x_cat, x_global

    def gate(self, x: Tensor) -> Tensor:
        _, x_global = self.descriptors(x)
        x_gsa = x_global * T.sigmoid(self.gsa(x_global)) if self.gsa is not None else x_global
        return T.sigmoid(T.relu(self.basic_norm(self.basic(x_gsa))))

    def forward(self, x: Tensor) -> Tensor:
        return x * self.gate(x)


def oca_forward(module: OCA, x: Tensor) -> Tensor:
    return module(x)


class HOACM(Module):
    """``LayerNorm_C(fuse(concat(OCA(f_sam), BSEA(f_mamba))) + (f_sam + f_mamba) / 2)``."""

    def __init__(self, channels: int, spatial: tuple[int, int], oca: bool = True, bsea: bool = True,
                 gcaa: bool = True, adapt_attn: bool = True, fuse_mode: str = "conv"):
        if fuse_mode not in FUSE_MODES:
            raise ConfigurationError(f"fuse mode must be one of {FUSE_MODES}, got {fuse_mode!r}")
        self.channels, self.fuse_mode = channels, fuse_mode
        self.oca = OCA(gcaa) if oca else None
        self.bsea = BSEA(channels, spatial, adapt_attn) if bsea else None
        self.fuse = Conv2d(2 * channels, channels, 1) if fuse_mode == "conv" else None
        self.norm = LayerNorm(channels, axis=1)

    def forward(self, f_sam: Tensor, f_mamba: Tensor) -> Tensor:
        if f_sam.shape != f_mamba.shape:
            raise DimensionError(f"HOACM inputs disagree: {f_sam.shape} vs {f_mamba.shape}")
        a = self.oca(f_sam) if self.oca is not None else f_sam
        b = self.bsea(f_mamba) if self.bsea is not None else f_mamba
        residual = (f_sam + f_mamba) * 0.5
        if self.fuse is not None:
            z = self.fuse(T.concat([a, b], axis=1)) + residual
        else:
            z = (a + b) * 0.5 + residual
        return self.norm(z)


def hoacm_fuse(module: HOACM, f_sam: Tensor, f_mamba: Tensor) -> Tensor:
    return module(f_sam, f_mamba)
