"""Gaussian-perturbed companion images for the regularization losses."""
from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import ConfigurationError


@dataclass
class NoiseConfig:
    mode: str = "multiplicative"
    sigma: float = 0.1
    seed: int = 0
    companions: int = 1
    clip: bool = True

    def __post_init__(self):
        if self.mode not in ("multiplicative", "additive"):
            raise ConfigurationError(f"unknown noise mode {self.mode!r}")
        if not self.sigma > 0:
            raise ConfigurationError(f"sigma must be positive, got {self.sigma}")
        if self.companions < 1:
            raise ConfigurationError("companions must be >= 1")


def gaussian_noise(shape, sigma, seed, dtype=torch.float64):
    g = torch.Generator().manual_seed(int(seed))
    return (torch.randn(shape, generator=g, dtype=torch.float64) * sigma).to(dtype)


def gaussian_companion(image: torch.Tensor, cfg: NoiseConfig, seed=None) -> torch.Tensor:
    """I + I*M (multiplicative) or I + M (additive), with M ~ N(0, sigma^2) per pixel.

    Every image in a batch gets its own draw; ``seed`` overrides ``cfg.seed``.
    """
    seed = cfg.seed if seed is None else seed
    noise = gaussian_noise(image.shape, cfg.sigma, seed, image.dtype)
    if cfg.mode == "multiplicative":
        out = image + image * noise
    else:
        out = image + noise
    return out.clamp(0.0, 1.0) if cfg.clip else out
