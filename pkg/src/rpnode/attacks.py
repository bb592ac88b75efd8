"""Signed-gradient L-infinity attacks (FGSM, BIM, PGD) on either side of an episode.

Both sides are attacked through the same objective: the query cross-entropy.
A support attack differentiates that query loss with respect to the support
images.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .errors import ConfigurationError
from .losses import cross_entropy
from .protoseg import BACKGROUND

FAMILIES = ("fgsm", "bim", "pgd")
TARGETS = ("query", "support")


@dataclass
class AttackSpec:
    family: str = "fgsm"
    target: str = "query"
    epsilon: float = 0.02
    iterations: int = 1
    step_size: Optional[float] = None
    seed: int = 0
    random_start: bool = True
    restarts: int = 1

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}")
        if self.target not in TARGETS:
            raise ConfigurationError(f"unknown attack target {self.target!r}")
        if not self.epsilon > 0:
            raise ConfigurationError(f"epsilon must be positive, got {self.epsilon}")
        if self.family == "fgsm":
            self.iterations = 1
        if self.iterations < 1 or self.restarts < 1:
            raise ConfigurationError("iterations and restarts must be >= 1")
        if self.step_size is not None and not self.step_size > 0:
            raise ConfigurationError("step_size must be positive")

    @property
    def step(self):
        if self.step_size is not None:
            return self.step_size
        if self.family == "fgsm":
            return self.epsilon
        if self.family == "bim":
            return self.epsilon / self.iterations
        return self.epsilon / 4


@dataclass
class AttackResult:
    images: torch.Tensor
    loss: float
    zero_gradient: bool = False


def query_loss(model, episode, support=None, query=None):
    probs = model.episode_probs(episode, support, query)
    gt = torch.from_numpy(np.asarray(episode.query_masks, dtype=np.int64))
    return cross_entropy(probs, gt, (BACKGROUND, *episode.class_ids))


def project(x, x0, eps):
    """Clip into the eps-ball around x0 and the [0, 1] box, exactly.

    Rounding in ``x0 + delta`` can overshoot the ball by an ulp; such entries
    are nudged back toward x0.
    """
    x = torch.minimum(torch.maximum(x, x0 - eps), x0 + eps).clamp(0.0, 1.0)
    for _ in range(4):
        over = (x - x0).abs() > eps
        if not bool(over.any()):
            break
        x = torch.where(over, torch.nextafter(x, x0), x)
    return x


def _signed_steps(loss_fn, x0, spec, start, track_loss):
    x = start
    zero = False
    loss_val = float("nan")
    for it in range(spec.iterations):
        xr = x.detach().requires_grad_(True)
        loss = loss_fn(xr)
        (g,) = torch.autograd.grad(loss, xr)
        if it == 0 and not bool((g != 0).any()):
            zero = True
        x = project(x.detach() + spec.step * torch.sign(g), x0, spec.epsilon)
    if track_loss:
        with torch.no_grad():
            loss_val = float(loss_fn(x))
    return x.detach(), loss_val, zero


def _run(loss_fn, x0, spec: AttackSpec, track_loss=True) -> AttackResult:
    x0 = x0.detach()
    g = torch.Generator().manual_seed(int(spec.seed))
    best = None
    n_runs = spec.restarts if spec.family == "pgd" else 1
    for _ in range(n_runs):
        if spec.family == "pgd" and spec.random_start:
            noise = (torch.rand(x0.shape, generator=g, dtype=torch.float64) * 2 - 1).to(x0.dtype)
            start = project(x0 + spec.epsilon * noise, x0, spec.epsilon)
        else:
            start = x0
        x, loss, zero = _signed_steps(loss_fn, x0, spec, start, track_loss or n_runs > 1)
        if zero:
            warnings.warn("attack gradient is identically zero; input returned unchanged")
            return AttackResult(x0.clone(), loss, True)
        if best is None or not loss <= best.loss:
            best = AttackResult(x, loss, zero)
    return best


def attack_query(model, episode, spec: AttackSpec, track_loss=True) -> AttackResult:
    if spec.target != "query":
        raise ConfigurationError("attack_query needs an AttackSpec with target='query'")
    x0 = torch.from_numpy(np.asarray(episode.query_images)).to(model.dtype)
    return _run(lambda x: query_loss(model, episode, query=x), x0, spec, track_loss)


def attack_support(model, episode, spec: AttackSpec, track_loss=True) -> AttackResult:
    """All support shots are perturbed jointly from one backward pass per step."""
    if spec.target != "support":
        raise ConfigurationError("attack_support needs an AttackSpec with target='support'")
    x0 = torch.from_numpy(np.asarray(episode.support_images)).to(model.dtype)
    return _run(lambda x: query_loss(model, episode, support=x), x0, spec, track_loss)


def attack_episode(model, episode, spec: AttackSpec, track_loss=False):
    """Attacked copy of the episode (only the targeted side changes)."""
    if spec.target == "query":
        res = attack_query(model, episode, spec, track_loss)
        return episode.with_images(query=res.images), res
    res = attack_support(model, episode, spec, track_loss)
    return episode.with_images(support=res.images), res
