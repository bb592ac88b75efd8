"""VGG-style convolutional trunk producing the initial ODE state."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
from torch import nn

from .errors import ConfigurationError

# Widths of the full-size VGG-16 trunk (d = 512), kept for optional large runs.
PAPER_SCALE_CHANNELS = [64, 128, 256, 512, 512]


@dataclass
class EncoderConfig:
    stage_channels: list = field(default_factory=lambda: [16, 32, 64])
    downsample_factor: int = 4
    convs_per_stage: int = 1
    in_channels: int = 1
    weight_init: str = "kaiming_normal"

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if not self.stage_channels or min(self.stage_channels) < 1:
            raise ConfigurationError("stage_channels must be a non-empty list of positive ints")
        f = self.downsample_factor
        if f < 1 or f & (f - 1):
            raise ConfigurationError(f"downsample_factor must be a power of two, got {f}")
        if int(math.log2(f)) > len(self.stage_channels):
            raise ConfigurationError("downsample_factor needs one pooling stage per factor of two")
        if self.weight_init not in ("kaiming_normal", "zeros"):
            raise ConfigurationError(f"unknown weight_init {self.weight_init!r}")

    @property
    def out_channels(self):
        return self.stage_channels[-1]


class Encoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        n_pools = int(math.log2(cfg.downsample_factor))
        layers = []
        c_in = cfg.in_channels
        for i, c in enumerate(cfg.stage_channels):
            for _ in range(cfg.convs_per_stage):
                layers += [nn.Conv2d(c_in, c, 3, padding=1), nn.ReLU()]
                c_in = c
            if i < n_pools:
                layers.append(nn.MaxPool2d(2, 2))
        self.body = nn.Sequential(*layers)

    @property
    def out_channels(self):
        return self.cfg.out_channels

    def forward(self, x):
        f = self.cfg.downsample_factor
        if x.shape[-1] % f or x.shape[-2] % f:
            raise ConfigurationError(
                f"image size {tuple(x.shape[-2:])} is not divisible by downsample factor {f}")
        return self.body(x)


def reset_parameters(module: nn.Module, seed: int, scheme: str = "kaiming_normal"):
    """Seeded in-place init: He-normal conv weights, zero biases."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in module.named_parameters():
            if name.endswith("bias") or scheme == "zeros":
                p.zero_()
            else:
                fan_in = p[0].numel()
                std = math.sqrt(2.0 / fan_in)
                p.copy_(torch.randn(p.shape, generator=g, dtype=torch.float64).to(p.dtype) * std)
    return module


def init_params(cfg: EncoderConfig, seed: int) -> Encoder:
    return reset_parameters(Encoder(cfg), seed, cfg.weight_init)


def encode(image: torch.Tensor, encoder: Encoder) -> torch.Tensor:
    """Accepts (H, W), (C, H, W) or (B, C, H, W); returns features without the
    leading batch axis when none was given."""
    squeeze = image.dim() < 4
    x = image
    while x.dim() < 4:
        x = x.unsqueeze(0)
    z = encoder(x)
    return z[0] if squeeze else z
