"""Segmentation, cluster and consistency losses and their weighted sum."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import torch

from .errors import ConfigurationError

log = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


@dataclass
class LossWeights:
    alpha: float = 0.001
    beta: float = 0.01

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ConfigurationError(f"{name} must be finite and >= 0, got {v}")


def labels_to_channels(gt: torch.Tensor, class_ids) -> torch.Tensor:
    """Map class ids in ``gt`` to channel indices of a map ordered by ``class_ids``."""
    lut = {int(c): i for i, c in enumerate(class_ids)}
    present = torch.unique(gt).tolist()
    missing = [c for c in present if c not in lut]
    if missing:
        raise ConfigurationError(f"ground-truth classes {missing} have no probability channel {tuple(class_ids)}")
    out = torch.zeros_like(gt, dtype=torch.long)
    for c, i in lut.items():
        out[gt == c] = i
    return out


def cross_entropy(probs: torch.Tensor, gt: torch.Tensor, class_ids=None) -> torch.Tensor:
    """Pixel-mean of -log p(true class), probabilities floored at 1e-12.

    ``probs`` is (..., C, H, W). ``gt`` holds channel indices, or class ids when
    ``class_ids`` gives the channel order.
    """
    if class_ids is not None:
        gt = labels_to_channels(gt, class_ids)
    else:
        gt = gt.long()
        if gt.numel() and (int(gt.min()) < 0 or int(gt.max()) >= probs.shape[-3]):
            raise ConfigurationError("ground-truth index outside the probability channels")
    if probs.shape[:-3] + probs.shape[-2:] != gt.shape:
        raise ConfigurationError(f"probs {tuple(probs.shape)} and labels {tuple(gt.shape)} disagree")
    p_true = torch.gather(probs, -3, gt.unsqueeze(-3)).squeeze(-3)
    return -torch.log(p_true.clamp_min(PROB_FLOOR)).mean()


def consistency_loss(probs_gauss: torch.Tensor, gt: torch.Tensor, class_ids=None) -> torch.Tensor:
    """Cross-entropy of the noisy-query prediction against the clean labels."""
    return cross_entropy(probs_gauss, gt, class_ids)


def flat_cosine(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    a, b = a.reshape(-1), b.reshape(-1)
    denom = a.norm() * b.norm()
    if float(denom.detach()) == 0.0:
        log.warning("zero-norm feature map in cluster loss; cosine taken as 0")
        return (a * b).sum() * 0.0
    return (a * b).sum() / denom


def cluster_loss(z_clean, z_gauss) -> torch.Tensor:
    """1 - mean over shots of the cosine between flattened clean and noisy features."""
    z_clean, z_gauss = list(z_clean), list(z_gauss)
    if len(z_clean) != len(z_gauss) or not z_clean:
        raise ConfigurationError("cluster loss needs two equal-length, non-empty feature lists")
    sims = []
    for a, b in zip(z_clean, z_gauss):
        if a.shape != b.shape:
            raise ConfigurationError(f"feature shapes differ: {tuple(a.shape)} vs {tuple(b.shape)}")
        sims.append(flat_cosine(a, b))
    return 1.0 - torch.stack(sims).mean()


def total_loss(ce, con, cl, w: LossWeights):
    return ce + w.alpha * con + w.beta * cl
