"""Selective-scan state-space branch: 1-D scan, four-direction SS2D, VSS blocks, decoder.

The scan recurrence per channel ``d`` and state index ``n`` is::

    h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t
    y_t = sum_n C_t * h_t + D * x_t,          h_0 = 0

It runs sequentially over ``t`` inside a compiled kernel, so the cost is
linear in sequence length.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numba
import numpy as np

from . import tensor as T
from .errors import ConfigurationError, ContractError, DimensionError, NumericError
from .layers import Conv2d, ConvTranspose2d, DepthwiseConv2d, LayerNorm, Module, Parameter, _uniform
from .tensor import Tensor, record


# ---------------------------------------------------------------------------
# compiled kernels
# ---------------------------------------------------------------------------

@numba.njit(cache=True, fastmath=False)
def _scan_forward(x, delta, A, Bt, Ct, Dskip, states):
    G, D, L = x.shape
    N = A.shape[2]
    y = np.empty_like(x)
    h = np.zeros(N, dtype=x.dtype)
    for g in range(G):
        for d in range(D):
            h[:] = 0
            skip = Dskip[g, d]
            for t in range(L):
                dt = delta[g, d, t]
                xv = x[g, d, t]
                acc = 0.0
                for n in range(N):
                    hn = math.exp(dt * A[g, d, n]) * h[n] + dt * Bt[g, t, n] * xv
                    h[n] = hn
                    states[g, d, t, n] = hn
                    acc += Ct[g, t, n] * hn
                y[g, d, t] = acc + skip * xv
    return y


@numba.njit(cache=True, fastmath=False)
def _scan_backward(dy, x, delta, A, Bt, Ct, Dskip, states):
    G, D, L = x.shape
    N = A.shape[2]
    dx = np.zeros_like(x)
    ddelta = np.zeros_like(delta)
    dA = np.zeros_like(A)
    dBt = np.zeros_like(Bt)
    dCt = np.zeros_like(Ct)
    dD = np.zeros_like(Dskip)
    dh = np.zeros(N, dtype=x.dtype)
    for g in range(G):
        for d in range(D):
            dh[:] = 0
            skip = Dskip[g, d]
            dskip = 0.0
            for t in range(L - 1, -1, -1):
                gy = dy[g, d, t]
                xv = x[g, d, t]
                dt = delta[g, d, t]
                dskip += gy * xv
                gx = gy * skip
                gdt = 0.0
                for n in range(N):
                    hn = states[g, d, t, n]
                    dCt[g, t, n] += gy * hn
                    dhn = dh[n] + gy * Ct[g, t, n]
                    a = A[g, d, n]
                    decay = math.exp(dt * a)
                    hprev = states[g, d, t - 1, n] if t > 0 else 0.0
                    ddecay = dhn * hprev
                    dA[g, d, n] += ddecay * decay * dt
                    bv = Bt[g, t, n]
                    gdt += ddecay * decay * a + dhn * bv * xv
                    dBt[g, t, n] += dhn * dt * xv
                    gx += dhn * dt * bv
                    dh[n] = dhn * decay
                ddelta[g, d, t] = gdt
                dx[g, d, t] = gx
            dD[g, d] = dskip
    return dx, ddelta, dA, dBt, dCt, dD


# ---------------------------------------------------------------------------
# scan operator
# ---------------------------------------------------------------------------

def _check_scan_inputs(x, delta, A, B, C, D):
    if x.ndim != 3:
        raise DimensionError(f"selective_scan expects x of shape (G, D, L), got {x.shape}")
    G, Dc, L = x.shape
    N = A.shape[-1]
    expected = {
        "delta": (delta.shape, (G, Dc, L)),
        "A": (A.shape, (G, Dc, N)),
        "B": (B.shape, (G, N, L)),
        "C": (C.shape, (G, N, L)),
        "D": (D.shape, (G, Dc)),
    }
    for name, (got, want) in expected.items():
        if tuple(got) != want:
            raise DimensionError(f"selective_scan: {name} has shape {got}, expected {want}")
    for name, arr in (("x", x), ("delta", delta), ("A", A), ("B", B), ("C", C), ("D", D)):
        if not np.all(np.isfinite(arr.data)):
            raise NumericError(f"selective_scan: non-finite values in {name}")
    if np.any(delta.data <= 0):
        raise ContractError("selective_scan: step sizes delta must be strictly positive")


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable selective scan.

    Shapes: ``x, delta`` (G, D, L); ``A`` (G, D, N); ``B, C`` (G, N, L);
    ``D`` (G, D). ``G`` is any flattened batch of independent sequences.
    """
    _check_scan_inputs(x, delta, A, B, C, D)
    dtype = x.dtype
    xd = np.ascontiguousarray(x.data)
    dd = np.ascontiguousarray(delta.data, dtype=dtype)
    Ad = np.ascontiguousarray(A.data, dtype=dtype)
    Bt = np.ascontiguousarray(np.swapaxes(B.data, 1, 2), dtype=dtype)
    Ct = np.ascontiguousarray(np.swapaxes(C.data, 1, 2), dtype=dtype)
    Dd = np.ascontiguousarray(D.data, dtype=dtype)
    G, Dc, L = xd.shape
    states = np.empty((G, Dc, L, Ad.shape[2]), dtype=dtype)
    y = _scan_forward(xd, dd, Ad, Bt, Ct, Dd, states)

    def backward(g):
        dx, ddelta, dA, dBt, dCt, dD = _scan_backward(
            np.ascontiguousarray(g, dtype=dtype), xd, dd, Ad, Bt, Ct, Dd, states
        )
        return dx, ddelta, dA, np.swapaxes(dBt, 1, 2), np.swapaxes(dCt, 1, 2), dD

    return record("selective_scan", y, (x, delta, A, B, C, D), backward)


def selective_scan_reference(x, delta, A, B, C, D) -> np.ndarray:
    """Plain sequential recurrence in float64, used as an oracle."""
    x, delta, A, B, C, D = (np.asarray(v, dtype=np.float64) for v in (x, delta, A, B, C, D))
    G, Dc, L = x.shape
    h = np.zeros((G, Dc, A.shape[2]))
    y = np.empty((G, Dc, L))
    for t in range(L):
        dt = delta[:, :, t, None]
        h = np.exp(dt * A) * h + dt * B[:, None, :, t] * x[:, :, t, None]
        y[:, :, t] = (h * C[:, None, :, t]).sum(axis=-1) + D * x[:, :, t]
    return y


# ---------------------------------------------------------------------------
# SS2D and VSS block
# ---------------------------------------------------------------------------

DIRECTIONS = ("row", "row_reversed", "col", "col_reversed")


def _inverse_softplus(y: float) -> float:
    return math.log(math.expm1(y))


@dataclass(frozen=True)
class VssBlockConfig:
    channels: int
    state_size: int = 8
    expand: int = 2
    d_conv: int = 3
    dt_init: float = 0.1

    @property
    def inner(self) -> int:
        return self.expand * self.channels

    @property
    def dt_rank(self) -> int:
        return max(1, math.ceil(self.inner / 16))


def unfold_directions(x: Tensor) -> Tensor:
    """(B, E, H, W) -> (B, 4, E, H*W) in the four traversal orders."""
    B, E, H, W = x.shape
    row = T.reshape(x, (B, E, H * W))
    col = T.reshape(T.permute(x, (0, 1, 3, 2)), (B, E, H * W))
    return T.stack([row, T.flip(row, 2), col, T.flip(col, 2)], axis=1)


def fold_directions(y: Tensor, H: int, W: int) -> Tensor:
    """Inverse of :func:`unfold_directions`, summing the four maps in fixed order."""
    B, _, E, L = y.shape

    def rows(t):
        return T.reshape(t, (B, E, H, W))

    def cols(t):
        return T.permute(T.reshape(t, (B, E, W, H)), (0, 1, 3, 2))

    out = rows(y[:, 0])
    out = out + rows(T.flip(y[:, 1], 2))
    out = out + cols(y[:, 2])
    out = out + cols(T.flip(y[:, 3], 2))
    return out


class SS2D(Module):
    """Four-direction selective scan with independent per-direction parameters."""

    def __init__(self, inner: int, state_size: int = 8, dt_rank: int | None = None,
                 dt_init: float = 0.1):
        self.inner, self.state_size = inner, state_size
        self.dt_rank = dt_rank or max(1, math.ceil(inner / 16))
        self.dt_init = dt_init
        K, E, N, R = 4, inner, state_size, self.dt_rank
        self.x_proj = Parameter(np.zeros((K, R + 2 * N, E)))
        self.dt_proj = Parameter(np.zeros((K, E, R)))
        self.dt_bias = Parameter(np.zeros((K, E)))
        self.A_log = Parameter(np.zeros((K, E, N)))
        self.D = Parameter(np.ones((K, E)))
        self.reset_parameters(np.random.default_rng(0))

    def reset_parameters(self, rng):
        E, R = self.inner, self.dt_rank
        self.x_proj.data = _uniform(rng, self.x_proj.shape, E)
        self.dt_proj.data = _uniform(rng, self.dt_proj.shape, R) * 0.1
        self.dt_bias.data = np.full(self.dt_bias.shape, _inverse_softplus(self.dt_init),
                                    dtype=self.dt_bias.dtype)
        # A = -exp(A_log) = -1
        self.A_log.data = np.zeros_like(self.A_log.data)
        self.D.data = np.ones_like(self.D.data)

    def scan_params(self, xs: Tensor):
        """Input-dependent (delta, B, C) for stacked directional sequences (B, 4, E, L)."""
        R, N = self.dt_rank, self.state_size
        x_dbl = T.matmul(self.x_proj, xs)  # (B, 4, R+2N, L)
        dts = x_dbl[:, :, :R]
        Bs = x_dbl[:, :, R:R + N]
        Cs = x_dbl[:, :, R + N:]
        bias = T.reshape(self.dt_bias, (1, 4, self.inner, 1))
        delta = T.softplus(T.matmul(self.dt_proj, dts) + bias)
        return delta, Bs, Cs

    def forward(self, x: Tensor) -> Tensor:
        B, E, H, W = x.shape
        if E != self.inner:
            raise DimensionError(f"SS2D expects {self.inner} channels, got {x.shape}")
        L, N = H * W, self.state_size
        xs = unfold_directions(x)
        delta, Bs, Cs = self.scan_params(xs)
        A = T.broadcast_to(T.neg(T.exp(self.A_log)), (B, 4, E, N))
        Dk = T.broadcast_to(self.D, (B, 4, E))
        y = selective_scan(
            T.reshape(xs, (B * 4, E, L)),
            T.reshape(delta, (B * 4, E, L)),
            T.reshape(A, (B * 4, E, N)),
            T.reshape(Bs, (B * 4, N, L)),
            T.reshape(Cs, (B * 4, N, L)),
            T.reshape(Dk, (B * 4, E)),
        )
        return fold_directions(T.reshape(y, (B, 4, E, L)), H, W)


def ss2d_forward(module: SS2D, x: Tensor) -> Tensor:
    return module(x)


class VssBlock(Module):
    """Pre-norm residual block: x + out(SS2D(silu(dwconv(in(norm(x))))))."""

    def __init__(self, cfg: VssBlockConfig):
        self.cfg = cfg
        C, E = cfg.channels, cfg.inner
        self.norm = LayerNorm(C, axis=1)
        self.in_proj = Conv2d(C, E, 1, bias=False)
        self.dwconv = DepthwiseConv2d(E, cfg.d_conv)
        self.ss2d = SS2D(E, cfg.state_size, cfg.dt_rank, cfg.dt_init)
        self.out_norm = LayerNorm(E, axis=1)
        self.out_proj = Conv2d(E, C, 1, bias=False)

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[1] != self.cfg.channels:
            raise DimensionError(f"VSS block expects {self.cfg.channels} channels, got {x.shape}")
        h = self.in_proj(self.norm(x))
        h = T.silu(self.dwconv(h))
        h = self.ss2d(h)
        return x + self.out_proj(self.out_norm(h))


def vss_block_forward(block: VssBlock, x: Tensor) -> Tensor:
    return block(x)


# ---------------------------------------------------------------------------
# encoder and decoder
# ---------------------------------------------------------------------------

class VssStage(Module):
    """VSS blocks followed by a stride-2 widening convolution."""

    def __init__(self, cfg: VssBlockConfig, depth: int, out_channels: int):
        self.blocks = [VssBlock(cfg) for _ in range(depth)]
        self.downsample = Conv2d(cfg.channels, out_channels, 2, stride=2)

    def forward_with_skip(self, x: Tensor) -> tuple[Tensor, Tensor]:
        for blk in self.blocks:
            x = blk(x)
        return x, self.downsample(x)

    def forward(self, x: Tensor) -> Tensor:
        return self.forward_with_skip(x)[1]


class DecoderStage(Module):
    def __init__(self, in_channels: int, cfg: VssBlockConfig, depth: int):
        C = cfg.channels
        self.up = ConvTranspose2d(in_channels, C, 2, stride=2)
        self.merge = Conv2d(2 * C, C, 1)
        self.blocks = [VssBlock(cfg) for _ in range(depth)]

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        up = self.up(x)
        if up.shape != skip.shape:
            raise ConfigurationError(
                f"decoder skip shape {skip.shape} does not match upsampled {up.shape}"
            )
        x = self.merge(T.concat([up, skip], axis=1))
        for blk in self.blocks:
            x = blk(x)
        return x


class Decoder(Module):
    """Progressive x2 upsampling with skip fusion and a shared 1x1 prediction head."""

    def __init__(self, bottleneck_channels: int, skip_channels: Sequence[int],
                 depths: Sequence[int], num_classes: int, state_size: int = 8,
                 expand: int = 2, d_conv: int = 3):
        if len(skip_channels) != len(depths):
            raise ConfigurationError("decoder needs one depth per skip stage")
        self.stages = []
        cin = bottleneck_channels
        for C, depth in zip(skip_channels, depths):
            cfg = VssBlockConfig(C, state_size, expand, d_conv)
            self.stages.append(DecoderStage(cin, cfg, depth))
            cin = C
        self.head = Conv2d(cin, num_classes, 1)

    def forward(self, bottleneck: Tensor, skips: Sequence[Tensor]) -> Tensor:
        if len(skips) != len(self.stages):
            raise ConfigurationError(
                f"decoder has {len(self.stages)} stages but received {len(skips)} skips"
            )
        x = bottleneck
        for stage, skip in zip(self.stages, skips):
            x = stage(x, skip)
        return self.head(x)


def decoder_forward(decoder: Decoder, bottleneck: Tensor, skips: Sequence[Tensor]) -> Tensor:
    return decoder(bottleneck, skips)
