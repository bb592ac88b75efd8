"""
Attacking the query and the support side
========================================

The attacks perturb either the slice being segmented or the labelled
support slice, always by ascending the query cross-entropy. This script
trains a small model briefly and shows how dice degrades as epsilon grows.
"""

# %%
import numpy as np

from rpnode.attacks import AttackSpec, attack_episode
from rpnode.config import EpisodeConfig, OptimConfig, RunConfig
from rpnode.encoder import EncoderConfig
from rpnode.episodes import EpisodeSampler, SynthConfig, generate_synthetic
from rpnode.train import Trainer, evaluate_episodes, eval_episodes

cfg = RunConfig(encoder=EncoderConfig([16, 32, 32]), optimizer=OptimConfig(lr=0.01),
                episodes=EpisodeConfig(e_train=300, e_test=10),
                data=SynthConfig(shape_mode="random", n_subjects=12, seed=0))
data = generate_synthetic(cfg.data)
trainer = Trainer(cfg, seed=0)
trainer.fit(EpisodeSampler(data["train"]))
episodes = eval_episodes(EpisodeSampler(data["test"]), cfg)

# %%
# Every attacked image stays inside the epsilon ball and the [0, 1] box.
adv, res = attack_episode(trainer.model, episodes[0], AttackSpec("pgd", "query", 0.02, iterations=10),
                           track_loss=True)
delta = np.asarray(adv.query_images) - episodes[0].query_images
print(f"pgd: max |delta| = {np.abs(delta).max():.4f}, loss after attack {res.loss:.3f}")

# %%
# Dice against attack strength, for both sides.
print("clean", round(evaluate_episodes(trainer.model, episodes).mean, 3))
for target in ("query", "support"):
    for eps in (0.01, 0.02, 0.04):
        r = evaluate_episodes(trainer.model, episodes, AttackSpec("fgsm", target, eps))
        print(f"fgsm {target:7s} eps={eps:.2f}  dice {r.mean:.3f}")
