"""The seeded synthetic benchmark behind the trend checks.

Desk-scale settings: 64x64 slices, a three-stage trunk at 1/4 resolution,
1-way 1-shot episodes, 2000 training episodes per run, two seeds, and 100
test episodes per novel class (200 in total). Classes are defined by
appearance; organ shapes are drawn at random, so a model cannot solve the
novel classes by recognising a training shape.
"""
from __future__ import annotations

from .config import EpisodeConfig, OptimConfig, RunConfig
from .encoder import EncoderConfig
from .episodes import SynthConfig, generate_synthetic

BENCHMARK_SEEDS = (0, 1)


def benchmark_config(variant: str = "rpnode") -> RunConfig:
    return RunConfig(
        model_variant=variant,
        encoder=EncoderConfig([16, 32, 32], downsample_factor=4),
        optimizer=OptimConfig(lr=0.01),
        episodes=EpisodeConfig(n_way=1, k_shot=1, n_query=1, e_train=2000, e_test=100),
        data=SynthConfig(shape_mode="random", seed=0),
        seeds=list(BENCHMARK_SEEDS),
    )


def benchmark_dataset():
    return generate_synthetic(benchmark_config().data)
