"""Neural-ODE feature block: convolutional dynamics and differentiable solvers.

Gradients flow by ordinary backpropagation through the unrolled solver steps,
so ``integrate`` is differentiable with respect to the initial state and every
parameter the dynamics close over.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import torch
from torch import nn

from .errors import ConfigurationError, IntegrationDiverged

METHODS = ("rk4_fixed", "dopri_adaptive", "euler_fixed")

Dynamics = Callable[[torch.Tensor, torch.Tensor], torch.Tensor]


@dataclass
class SolverConfig:
    method: str = "rk4_fixed"
    terminal_time: float = 1.0
    steps: int = 8
    rtol: float = 1e-5
    atol: float = 1e-6
    max_steps: int = 10_000

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigurationError(f"unknown solver method {self.method!r}; expected one of {METHODS}")
        if not self.terminal_time > 0:
            raise ConfigurationError(f"terminal_time must be positive, got {self.terminal_time}")
        if self.steps < 1:
            raise ConfigurationError(f"steps must be >= 1, got {self.steps}")
        if not (self.rtol > 0 and self.atol > 0):
            raise ConfigurationError("rtol and atol must be positive")


@dataclass
class ODEState:
    value: torch.Tensor
    time: float = 0.0

    def __post_init__(self):
        if not bool(torch.isfinite(self.value).all()):
            raise ConfigurationError("ODE state contains non-finite entries")


class ConvDynamics(nn.Module):
    """Three 3x3 convolutions defining dZ/dt = h(Z, t).

    With ``time_conditioning`` the scalar time is broadcast into one extra
    constant channel ahead of the first convolution.
    """

    def __init__(self, channels: int, hidden: Optional[int] = None, time_conditioning: bool = True):
        super().__init__()
        hidden = hidden or channels
        self.channels = channels
        self.time_conditioning = time_conditioning
        extra = 1 if time_conditioning else 0
        self.conv1 = nn.Conv2d(channels + extra, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, hidden, 3, padding=1)
        self.conv3 = nn.Conv2d(hidden, channels, 3, padding=1)
        self.act = nn.Tanh()

    def forward(self, t, z):
        if z.dim() != 4 or z.shape[1] != self.channels:
            raise ConfigurationError(
                f"dynamics expects (B, {self.channels}, H, W) states, got {tuple(z.shape)}")
        if self.time_conditioning:
            tt = torch.as_tensor(t, dtype=z.dtype, device=z.device)
            tt = tt.expand(z.shape[0], 1, z.shape[2], z.shape[3])
            z = torch.cat([z, tt], dim=1)
        h = self.act(self.conv1(z))
        h = self.act(self.conv2(h))
        return self.conv3(h)


class ZeroDynamics(nn.Module):
    """dZ/dt = 0. Integrating it returns the initial state unchanged."""

    def forward(self, t, z):
        return torch.zeros_like(z)


class LinearDynamics(nn.Module):
    """dZ/dt = rate * Z, the analytic test problem (solution Z0 * exp(rate * t))."""

    def __init__(self, rate: float = -1.0):
        super().__init__()
        self.rate = rate

    def forward(self, t, z):
        return self.rate * z

    def exact(self, z0, t):
        return z0 * math.exp(self.rate * t)


def eval_dynamics(state: ODEState, dynamics: Dynamics) -> torch.Tensor:
    t = torch.tensor(state.time, dtype=state.value.dtype)
    out = dynamics(t, state.value)
    if out.shape != state.value.shape:
        raise ConfigurationError(
            f"dynamics returned shape {tuple(out.shape)} for state {tuple(state.value.shape)}")
    return out


def _check_finite(z, step):
    if not bool(torch.isfinite(z).all()):
        raise IntegrationDiverged(step)


def _rk4(f, z, t, h):
    k1 = f(t, z)
    k2 = f(t + h / 2, z + (h / 2) * k1)
    k3 = f(t + h / 2, z + (h / 2) * k2)
    k4 = f(t + h, z + h * k3)
    return z + (h / 6) * (k1 + 2 * k2 + 2 * k3 + k4)


def _fixed_grid(f, z, cfg, stepper):
    h = cfg.terminal_time / cfg.steps
    for i in range(cfg.steps):
        t = torch.tensor(i * h, dtype=z.dtype)
        z = stepper(f, z, t, h)
        _check_finite(z, i + 1)
    return z


def _euler(f, z, t, h):
    return z + h * f(t, z)


# Dormand-Prince 5(4) tableau
_DP_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_DP_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_DP_B5 = (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0)
_DP_B4 = (5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40)


def _dopri(f, z, cfg):
    T = cfg.terminal_time
    t = 0.0
    h = T / cfg.steps
    k1 = f(torch.tensor(t, dtype=z.dtype), z)
    accepted = 0
    for attempt in range(cfg.max_steps):
        if t >= T:
            return z
        h = min(h, T - t)
        ks = [k1]
        for i in range(1, 7):
            zi = z
            for a, k in zip(_DP_A[i], ks):
                if a:
                    zi = zi + (h * a) * k
            ks.append(f(torch.tensor(t + _DP_C[i] * h, dtype=z.dtype), zi))
        z5 = z
        for b, k in zip(_DP_B5, ks):
            if b:
                z5 = z5 + (h * b) * k
        err = h * sum((b5 - b4) * k for b5, b4, k in zip(_DP_B5, _DP_B4, ks))
        scale = cfg.atol + cfg.rtol * torch.maximum(z.detach().abs(), z5.detach().abs())
        ratio = float(torch.sqrt(torch.mean((err.detach() / scale) ** 2)))
        if not math.isfinite(ratio):
            raise IntegrationDiverged(accepted + 1)
        if ratio <= 1.0:
            t += h
            z = z5
            k1 = ks[6]  # FSAL
            accepted += 1
            _check_finite(z, accepted)
        factor = 5.0 if ratio == 0 else min(5.0, max(0.2, 0.9 * ratio ** -0.2))
        h = h * factor
    raise IntegrationDiverged(accepted, "adaptive solver exceeded max_steps")


def integrate(initial: torch.Tensor, dynamics: Dynamics, cfg: SolverConfig = None) -> torch.Tensor:
    """Approximate Z(T) = Z(0) + int_0^T h(Z(t), t) dt."""
    cfg = cfg or SolverConfig()
    _check_finite(initial, 0)
    if cfg.method == "rk4_fixed":
        return _fixed_grid(dynamics, initial, cfg, _rk4)
    if cfg.method == "euler_fixed":
        return _fixed_grid(dynamics, initial, cfg, _euler)
    return _dopri(dynamics, initial, cfg)


def trajectory(initial, dynamics, cfg, n_points):
    """Sample the solution at ``n_points`` equally spaced interior times."""
    h = cfg.terminal_time / (n_points + 1)
    sub = SolverConfig(method=cfg.method, terminal_time=h, steps=cfg.steps, rtol=cfg.rtol, atol=cfg.atol)
    z = initial
    out = []
    for _ in range(n_points):
        z = integrate(z, _shifted(dynamics, len(out) * h + 0.0), sub)
        out.append(z)
    return torch.stack(out)


def _shifted(dynamics, t0):
    return lambda t, z: dynamics(t + t0, z)


@dataclass
class OrderEstimate:
    order: float
    errors: list
    steps: list
    indeterminate: bool = False


def convergence_order(dynamics, initial, T=1.0, exact=None, method="rk4_fixed",
                      base_steps=4, halvings=3, floor=1e-13):
    """Empirical order of accuracy from successive step halvings.

    ``exact`` is the reference Z(T); when omitted it is taken from an RK4 run
    on a grid 64 times finer than the finest probed grid.
    """
    with torch.no_grad():
        if exact is None:
            ref = SolverConfig("rk4_fixed", T, base_steps * 2 ** (halvings + 6))
            exact = integrate(initial, dynamics, ref)
        steps = [base_steps * 2 ** i for i in range(halvings + 1)]
        errors = []
        for n in steps:
            z = integrate(initial, dynamics, SolverConfig(method, T, n))
            errors.append(float(torch.max(torch.abs(z - exact))))
    scale = max(1.0, float(torch.max(torch.abs(exact))))
    if min(errors) <= floor * scale:
        return OrderEstimate(float("nan"), errors, steps, indeterminate=True)
    orders = [math.log2(a / b) for a, b in zip(errors, errors[1:])]
    return OrderEstimate(sum(orders) / len(orders), errors, steps)
