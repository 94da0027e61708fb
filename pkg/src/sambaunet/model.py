"""Full dual-encoder segmentation network."""

from __future__ import annotations

import dataclasses
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ConfigurationError
from .hiera import AdapterSwitches, HieraStage, HieraStageConfig, is_adapter_parameter
from .hoacm import FUSE_MODES, HOACM
from .layers import Conv2d, Module
from .ssm import Decoder, VssBlockConfig, VssStage
from .tensor import Tensor

# switch name -> (ablation row label, alias used in the component table)
ABLATION_SWITCHES = OrderedDict([
    ("refiner", ("w/o Refiner", "Refiner")),
    ("channel_attn", ("w/o ChannelAttn", "ChannelAttn")),
    ("mlp_adapter", ("w/o MLP-Adapter (IRMLP)", "IRMLP")),
    ("adapt_attn", ("w/o AdaptAttn", "AdaptAttn")),
    ("gcaa", ("w/o GCAA (OCA-gate)", "GCAA")),
    ("oca", ("w/o OCA", "OCA")),
    ("bsea", ("w/o BSEA", "BSEA")),
])


@dataclass
class NetConfig:
    image_size: int = 64
    in_channels: int = 1
    num_classes: int = 4
    channels: tuple = (32, 64, 128)
    hiera_blocks: tuple = (2, 2, 2)
    heads: tuple = (1, 2, 4)
    window: int = 4
    mlp_ratio: int = 2
    vss_blocks: tuple = (2, 2, 2)
    decoder_blocks: tuple = (1, 1, 1)
    state_size: int = 8
    expand: int = 2
    d_conv: int = 3
    refiner_ratio: float = 0.25
    adapter_ratio: float = 0.25
    adapter_scale: float = 0.5
    # ablation switches
    refiner: bool = True
    channel_attn: bool = True
    mlp_adapter: bool = True
    adapt_attn: bool = True
    gcaa: bool = True
    oca: bool = True
    bsea: bool = True
    hoacm_fuse_mode: str = "conv"
    freeze_trunk: bool = False
    seed: int = 0

    def __post_init__(self):
        for name in ("channels", "hiera_blocks", "heads", "vss_blocks", "decoder_blocks"):
            setattr(self, name, tuple(getattr(self, name)))

    @property
    def stages(self) -> int:
        return len(self.channels)

    def stage_extents(self) -> list[int]:
        return [self.image_size >> i for i in range(self.stages)]

    def validate(self) -> None:
        n = self.stages
        for name in ("hiera_blocks", "heads", "vss_blocks", "decoder_blocks"):
            if len(getattr(self, name)) != n:
                raise ConfigurationError(f"{name} needs {n} entries, got {getattr(self, name)}")
        if self.hoacm_fuse_mode not in FUSE_MODES:
            raise ConfigurationError(f"unknown hoacm_fuse_mode {self.hoacm_fuse_mode!r}")
        if self.image_size % (1 << n):
            raise ConfigurationError(
                f"image size {self.image_size} not divisible by 2^{n} for {n} stages"
            )
        for extent, C, h in zip(self.stage_extents(), self.channels, self.heads):
            if extent % self.window:
                raise ConfigurationError(f"window {self.window} does not divide stage extent {extent}")
            if extent % 2:
                raise ConfigurationError(f"stage extent {extent} must be even")
            if C % h:
                raise ConfigurationError(f"{h} heads do not divide {C} channels")

    def ablated(self, switch: str) -> "NetConfig":
        if switch not in ABLATION_SWITCHES:
            raise ConfigurationError(f"unknown ablation switch {switch!r}")
        return dataclasses.replace(self, **{switch: False})

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "NetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigurationError(f"unknown NetConfig fields {sorted(unknown)}")
        return cls(**d)


PRESETS = {
    "toy": NetConfig(),
    "desk": NetConfig(channels=(8, 16, 32), hiera_blocks=(1, 1, 1), heads=(1, 2, 4),
                      vss_blocks=(1, 1, 1), decoder_blocks=(1, 1, 1), state_size=4, expand=1,
                      refiner_ratio=0.5, adapter_ratio=0.5),
    "micro": NetConfig(image_size=8, channels=(4, 8), hiera_blocks=(1, 1), heads=(1, 2), window=2,
                       vss_blocks=(1, 1), decoder_blocks=(1, 1), state_size=2, expand=1,
                       refiner_ratio=0.5, adapter_ratio=0.5),
}


class SambaUNet(Module):
    def __init__(self, cfg: NetConfig):
        cfg.validate()
        self.cfg = cfg
        C = cfg.channels
        extents = cfg.stage_extents()
        adapters = AdapterSwitches(
            refiner=cfg.refiner, channel_attn=cfg.channel_attn, mlp_adapter=cfg.mlp_adapter,
            refiner_ratio=cfg.refiner_ratio, adapter_ratio=cfg.adapter_ratio,
            adapter_scale=cfg.adapter_scale,
        )
        out_ch = list(C[1:]) + [2 * C[-1]]
        self.hiera_stem = Conv2d(cfg.in_channels, C[0], 3, padding=1)
        self.hiera = [
            HieraStage(HieraStageConfig(c, b, cfg.window, h, o, cfg.mlp_ratio), adapters)
            for c, b, h, o in zip(C, cfg.hiera_blocks, cfg.heads, out_ch)
        ]
        self.mamba_stem = Conv2d(cfg.in_channels, C[0], 3, padding=1)
        self.mamba = [
            VssStage(VssBlockConfig(c, cfg.state_size, cfg.expand, cfg.d_conv), b, o)
            for c, b, o in zip(C, cfg.vss_blocks, out_ch)
        ]
        self.hoacm = [
            HOACM(c, (e, e), cfg.oca, cfg.bsea, cfg.gcaa, cfg.adapt_attn, cfg.hoacm_fuse_mode)
            for c, e in zip(C, extents)
        ]
        self.decoder = Decoder(out_ch[-1], C[::-1], cfg.decoder_blocks[::-1], cfg.num_classes,
                               cfg.state_size, cfg.expand, cfg.d_conv)
        self.init_parameters(cfg.seed)
        self.set_frozen_trunk(cfg.freeze_trunk)

    def set_frozen_trunk(self, frozen: bool) -> None:
        for name, p in self.named_parameters():
            if name.startswith("hiera") and not is_adapter_parameter(name):
                p.trainable = not frozen

    def trainable_parameters(self):
        return [p for p in self.parameters() if p.trainable]

    def encode(self, image: Tensor):
        hs, ms = [], []
        h = self.hiera_stem(image)
        m = self.mamba_stem(image)
        for hstage, mstage in zip(self.hiera, self.mamba):
            skip_h, h = hstage.forward_with_skip(h)
            skip_m, m = mstage.forward_with_skip(m)
            hs.append(skip_h)
            ms.append(skip_m)
        return hs, ms, h, m

    def forward(self, image: Tensor) -> Tensor:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.image_size, cfg.image_size)
        if image.ndim != 4 or image.shape[1:] != expected:
            raise ConfigurationError(f"input must be (B, {expected}), got {image.shape}")
        hs, ms, h, m = self.encode(image)
        fused = [fuse(a, b) for fuse, a, b in zip(self.hoacm, hs, ms)]
        return self.decoder(h + m, fused[::-1])


def forward(image: Tensor, cfg: NetConfig, net: SambaUNet | None = None) -> Tensor:
    return (net or SambaUNet(cfg))(image)


def _component(name: str) -> str:
    if name.startswith("hiera"):
        if ".refiner." in name:
            return "hiera.refiner"
        if ".mlp_adapter." in name:
            return "hiera.mlp_adapter"
        return "hiera.trunk"
    if name.startswith("mamba"):
        return "mamba"
    if name.startswith("hoacm"):
        part = name.split(".")[2]
        return f"hoacm.{part}" if part in ("oca", "bsea", "fuse") else "hoacm.norm"
    return name.split(".")[0]


def parameter_census(cfg_or_net) -> "OrderedDict[str, int]":
    """Per-component parameter counts plus ``total`` and ``trainable``."""
    net = cfg_or_net if isinstance(cfg_or_net, SambaUNet) else SambaUNet(cfg_or_net)
    counts: OrderedDict[str, int] = OrderedDict(
        (k, 0) for k in ("hiera.trunk", "hiera.refiner", "hiera.mlp_adapter", "mamba",
                         "hoacm.oca", "hoacm.bsea", "hoacm.fuse", "hoacm.norm", "decoder")
    )
    trainable = 0
    for name, p in net.named_parameters():
        counts[_component(name)] = counts.get(_component(name), 0) + p.size
        trainable += p.size if p.trainable else 0
    counts["total"] = sum(counts.values())
    counts["trainable"] = trainable
    return counts
