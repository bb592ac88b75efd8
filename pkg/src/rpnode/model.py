"""End-to-end few-shot segmenter: encoder, feature block, prototype head."""
from __future__ import annotations

import numpy as np
import torch
from torch import nn

from .encoder import Encoder, EncoderConfig, reset_parameters
from .errors import ConfigurationError
from .ode import ConvDynamics, SolverConfig, ZeroDynamics, integrate
from .protoseg import compute_prototypes, predict, upsample_features

BLOCKS = ("ode", "identity", "cnn")


class ODEBlock(nn.Module):
    def __init__(self, dynamics, solver: SolverConfig):
        super().__init__()
        self.dynamics = dynamics
        self.solver = solver

    def forward(self, z):
        return integrate(z, self.dynamics, self.solver)


class CNNBlock(nn.Module):
    """The three conv+ReLU layers a plain VGG trunk would have in place of the ODE."""

    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
            nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
        )

    def forward(self, z):
        return self.body(z)


def _tensor(x, dtype):
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x))
    return x.to(dtype)


class FewShotSegmenter(nn.Module):
    def __init__(self, encoder_cfg: EncoderConfig = None, solver: SolverConfig = None,
                 block: str = "ode", temperature: float = 20.0, time_conditioning: bool = True,
                 dynamics_hidden: int = None):
        super().__init__()
        encoder_cfg = encoder_cfg or EncoderConfig()
        if block not in BLOCKS:
            raise ConfigurationError(f"unknown feature block {block!r}")
        self.block_kind = block
        self.temperature = temperature
        self.encoder = Encoder(encoder_cfg)
        d = encoder_cfg.out_channels
        solver = solver or SolverConfig()
        if block == "ode":
            self.block = ODEBlock(ConvDynamics(d, dynamics_hidden, time_conditioning), solver)
        elif block == "identity":
            self.block = ODEBlock(ZeroDynamics(), solver)
        else:
            self.block = CNNBlock(d)

    @property
    def dtype(self):
        return next(self.parameters()).dtype

    def features(self, images):
        """(B, H, W) or (B, 1, H, W) images -> block output Z(T), (B, d, H', W')."""
        x = _tensor(images, self.dtype)
        if x.dim() == 3:
            x = x.unsqueeze(1)
        return self.block(self.encoder(x))

    def predict_from_features(self, z_support, support_masks, z_query, class_ids, hw):
        """Probability maps (N_Q, 1 + N, H, W); channel 0 is background."""
        masks = _tensor(support_masks, torch.long)
        zs = upsample_features(z_support, hw)
        protos = compute_prototypes(list(zs), list(masks), class_ids)
        zq = upsample_features(z_query, hw)
        return predict(zq, protos, self.temperature), protos

    def forward(self, support_images, support_masks, query_images, class_ids):
        si = _tensor(support_images, self.dtype)
        qi = _tensor(query_images, self.dtype)
        hw = si.shape[-2:]
        z = self.features(torch.cat([si.reshape(-1, *hw), qi.reshape(-1, *hw)]))
        n_s = si.reshape(-1, *hw).shape[0]
        probs, _ = self.predict_from_features(z[:n_s], support_masks, z[n_s:], class_ids, hw)
        return probs

    def episode_probs(self, episode, support=None, query=None):
        return self(episode.support_images if support is None else support, episode.support_masks,
                    episode.query_images if query is None else query, episode.class_ids)


def build_model(encoder_cfg=None, solver=None, block="ode", seed=0, dtype=torch.float32, **kw):
    model = FewShotSegmenter(encoder_cfg, solver, block, **kw)
    reset_parameters(model, seed, model.encoder.cfg.weight_init)
    if block == "ode":
        # small initial dynamics keep the flow close to identity at start
        with torch.no_grad():
            model.block.dynamics.conv3.weight.mul_(0.1)
    return model.to(dtype)
