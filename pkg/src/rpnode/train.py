"""Episodic training (regularized and adversarial), evaluation, checkpoints, experiments."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import config as config_io
from .attacks import AttackSpec, attack_episode
from .config import RunConfig
from .episodes import EpisodeSampler, generate_synthetic, load_dataset
from .errors import NonFiniteLoss, RPNodeError
from .losses import cluster_loss, consistency_loss, cross_entropy, total_loss
from .model import build_model
from .perturb import gaussian_companion
from .protoseg import BACKGROUND, argmax_mask, predict, upsample_features

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("attack", "target", "eps", "iters", "organ_class",
                  "dice_mean", "dice_std", "n_episodes", "seed")


def derive_seed(*parts) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _dtype(name):
    return torch.float64 if name == "float64" else torch.float32


def make_model(cfg: RunConfig, seed: int):
    return build_model(cfg.encoder, cfg.solver, cfg.block, seed=seed, dtype=_dtype(cfg.dtype),
                       temperature=cfg.temperature, time_conditioning=cfg.time_conditioning,
                       dynamics_hidden=cfg.dynamics_hidden or None)


# -- losses of one episode ------------------------------------------------------

def episode_losses(model, episode, cfg: RunConfig, noise_seed: int = 0, regularized=None):
    """CE, consistency and cluster losses for one episode, plus their weighted total.

    Prototypes always come from the clean support; the noisy query is scored
    against them. Unregularized variants skip the companions and report zeros.
    """
    regularized = cfg.regularized if regularized is None else regularized
    dt = model.dtype
    s = torch.from_numpy(np.asarray(episode.support_images)).to(dt) \
        if isinstance(episode.support_images, np.ndarray) else episode.support_images.to(dt)
    q = torch.from_numpy(np.asarray(episode.query_images)).to(dt) \
        if isinstance(episode.query_images, np.ndarray) else episode.query_images.to(dt)
    hw = s.shape[-2:]
    ids = (BACKGROUND, *episode.class_ids)
    gt = torch.from_numpy(np.asarray(episode.query_masks, dtype=np.int64))
    n_s, n_q = s.shape[0], q.shape[0]

    batch = [s, q]
    n_comp = cfg.noise.companions if regularized else 0
    for c in range(n_comp):
        batch.append(gaussian_companion(s, cfg.noise, seed=derive_seed(noise_seed, c, 0)))
        batch.append(gaussian_companion(q, cfg.noise, seed=derive_seed(noise_seed, c, 1)))
    z = model.features(torch.cat(batch))
    zs, zq = z[:n_s], z[n_s:n_s + n_q]
    probs, protos = model.predict_from_features(zs, episode.support_masks, zq, episode.class_ids, hw)
    ce = cross_entropy(probs, gt, ids)

    zero = ce.new_zeros(())
    con, cl = zero, zero
    off = n_s + n_q
    for c in range(n_comp):
        zsg = z[off:off + n_s]
        zqg = z[off + n_s:off + n_s + n_q]
        off += n_s + n_q
        probs_g = predict(upsample_features(zqg, hw), protos, model.temperature)
        con = con + consistency_loss(probs_g, gt, ids) / n_comp
        cl = cl + cluster_loss(list(zs), list(zsg)) / n_comp
    total = total_loss(ce, con, cl, cfg.weights)
    return dict(ce=ce, con=con, cl=cl, total=total)


def _record(losses, step, kind):
    rec = {k: float(v.detach()) for k, v in losses.items()}
    rec.update(step=step, kind=kind)
    return rec


# -- trainer --------------------------------------------------------------------

class Trainer:
    """Owns one model, its optimizer and the step counter for a single seed."""

    def __init__(self, cfg: RunConfig, seed: int = 0, model=None):
        self.cfg = cfg
        self.seed = int(seed)
        self.model = model if model is not None else make_model(cfg, seed)
        o = cfg.optimizer
        self.optimizer = torch.optim.SGD(self.model.parameters(), lr=o.lr, momentum=o.momentum,
                                         weight_decay=o.weight_decay)
        self.scheduler = torch.optim.lr_scheduler.StepLR(self.optimizer, o.decay_every, o.decay_gamma)
        self.step = 0
        self.history = []

    def _apply(self, loss, episode):
        if not math.isfinite(float(loss.detach())):
            raise NonFiniteLoss(f"non-finite loss at step {self.step} (episode seed {episode.seed})")
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        self.optimizer.step()

    def noise_seed(self, step=None):
        return derive_seed(self.seed, self.step if step is None else step, 7)

    def train_step(self, episode):
        """One Gaussian-regularized update: L_CE + alpha L_CON + beta L_CL."""
        self.model.train()
        losses = episode_losses(self.model, episode, self.cfg, self.noise_seed())
        self._apply(losses["total"], episode)
        rec = _record(losses, self.step, "clean")
        self.step += 1
        self.scheduler.step()
        self.history.append(rec)
        return rec

    def _adversarial(self, episode, target):
        eps = self.cfg.sat_epsilon
        if eps <= 0:
            return episode
        spec = AttackSpec("fgsm", target, eps, seed=self.noise_seed())
        adv, _ = attack_episode(self.model, episode, spec)
        return adv

    def train_step_sat(self, episode):
        """Clean, support-adversarial and query-adversarial sub-steps (FGSM at sat_epsilon).

        Each adversarial batch is generated from the parameters current at its
        sub-step. With ``sat_separate_steps`` off the three losses share one update.
        """
        self.model.train()
        records = []
        kinds = ("clean", "support_adv", "query_adv")
        if self.cfg.sat_separate_steps:
            for kind in kinds:
                ep = episode if kind == "clean" else self._adversarial(episode, kind.split("_")[0])
                losses = episode_losses(self.model, ep, self.cfg, regularized=False)
                self._apply(losses["total"], episode)
                records.append(_record(losses, self.step, kind))
        else:
            eps = [episode, self._adversarial(episode, "support"), self._adversarial(episode, "query")]
            all_losses = [episode_losses(self.model, ep, self.cfg, regularized=False) for ep in eps]
            self._apply(sum(l["total"] for l in all_losses), episode)
            records = [_record(l, self.step, k) for l, k in zip(all_losses, kinds)]
        self.step += 1
        self.scheduler.step()
        self.history.extend(records)
        return records

    def fit(self, sampler: EpisodeSampler, n_steps=None, log_path=None):
        n_steps = self.cfg.episodes.e_train if n_steps is None else n_steps
        e = self.cfg.episodes
        step_fn = self.train_step_sat if self.cfg.model_variant == "sat" else self.train_step
        writer = None
        fh = open(log_path, "w", newline="") if log_path else None
        try:
            for _ in range(n_steps):
                ep = sampler.sample(e.n_way, e.k_shot, e.n_query, seed=derive_seed(self.seed, self.step, 3))
                out = step_fn(ep)
                recs = out if isinstance(out, list) else [out]
                if fh:
                    if writer is None:
                        writer = csv.DictWriter(fh, ["step", "kind", "ce", "con", "cl", "total"])
                        writer.writeheader()
                    for r in recs:
                        writer.writerow({k: r[k] for k in writer.fieldnames})
        finally:
            if fh:
                fh.close()
        return self.history


# -- evaluation -----------------------------------------------------------------

def dice_score(pred, gt) -> float:
    """2|P & G| / (|P| + |G|) on boolean foreground maps; both empty scores 1."""
    pred = np.asarray(pred, bool)
    gt = np.asarray(gt, bool)
    denom = pred.sum() + gt.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, gt).sum() / denom)


@dataclass
class EvalResult:
    dice: dict = field(default_factory=dict)  # class id -> per-episode dice array
    attack: AttackSpec = None

    def summary(self):
        return {c: (float(np.mean(v)), float(np.std(v)), len(v)) for c, v in sorted(self.dice.items())}

    @property
    def mean(self):
        return float(np.mean([np.mean(v) for v in self.dice.values()]))


def evaluate_episodes(model, episodes, attack: AttackSpec = None) -> EvalResult:
    """Dice per episode and class (averaged over the episode's queries)."""
    if not episodes:
        raise RPNodeError("no episodes to evaluate")
    model.eval()
    dice = {}
    for i, ep in enumerate(episodes):
        if attack is not None:
            spec = AttackSpec(**{**attack.__dict__, "seed": derive_seed(attack.seed, i)})
            ep, _ = attack_episode(model, ep, spec)
        with torch.no_grad():
            probs = model.episode_probs(ep)
        pred = argmax_mask(probs, (BACKGROUND, *ep.class_ids)).numpy()
        for c in ep.class_ids:
            scores = [dice_score(p == c, g == c) for p, g in zip(pred, ep.query_masks)]
            dice.setdefault(int(c), []).append(float(np.mean(scores)))
    return EvalResult({c: np.asarray(v) for c, v in dice.items()}, attack)


def eval_episodes(sampler: EpisodeSampler, cfg: RunConfig, seed=None):
    """E_test episodes per novel class (1-way) or E_test mixed episodes (N-way)."""
    e = cfg.episodes
    seed = cfg.eval_seed if seed is None else seed
    if e.n_way == 1:
        return [sampler.sample(1, e.k_shot, e.n_query, [c], derive_seed(seed, c, i))
                for c in sampler.classes for i in range(e.e_test)]
    return [sampler.sample(e.n_way, e.k_shot, e.n_query, None, derive_seed(seed, i))
            for i in range(e.e_test)]


def evaluate(model, split, cfg: RunConfig, attack: AttackSpec = None, seed=None) -> EvalResult:
    sampler = split if isinstance(split, EpisodeSampler) else EpisodeSampler(split)
    return evaluate_episodes(model, eval_episodes(sampler, cfg, seed), attack)


def evaluate_under_attack(model, episodes, spec: AttackSpec, seeds=(0, 1)):
    """Attacked dice aggregated over episodes and attack seeds.

    Returns per-seed results plus (mean, std) over all episode scores.
    """
    if not episodes:
        raise RPNodeError("no episodes to evaluate")
    runs = []
    for s in seeds:
        runs.append(evaluate_episodes(model, episodes, AttackSpec(**{**spec.__dict__, "seed": s})))
    scores = np.concatenate([np.concatenate(list(r.dice.values())) for r in runs])
    return dict(runs=runs, dice_mean=float(scores.mean()), dice_std=float(scores.std()),
                n_episodes=len(episodes))


def metric_rows(result: EvalResult, seed, attack: AttackSpec = None):
    rows = []
    for c, (m, s, n) in result.summary().items():
        rows.append(dict(
            attack=attack.family if attack else "clean",
            target=attack.target if attack else "none",
            eps=repr(float(attack.epsilon)) if attack else "0.0",
            iters=attack.iterations if attack else 0,
            organ_class=c, dice_mean=repr(m), dice_std=repr(s), n_episodes=n, seed=seed))
    return rows


def write_metrics(rows, path, append=False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, METRIC_COLUMNS, lineterminator="\n")
        if new:
            w.writeheader()
        for r in rows:
            w.writerow(r)


# -- checkpoints ------------------------------------------------------------------
# Layout: MAGIC | uint64 LE header length | JSON header | float64 LE tensor data.

MAGIC = b"RPNODE-CKPT-1\n"


def save_checkpoint(path, model, cfg: RunConfig, step=0, rng=None):
    state = model.state_dict()
    entries, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = state[name].detach().cpu().to(torch.float64).numpy().astype("<f8")
        data = arr.tobytes()
        entries.append(dict(name=name, shape=list(arr.shape), offset=offset, nbytes=len(data)))
        blobs.append(data)
        offset += len(data)
    header = dict(config=config_io.to_text(cfg), step=int(step), rng=rng or {}, tensors=entries)
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)


def load_checkpoint(path):
    """Returns (model, cfg, meta) with meta holding ``step`` and ``rng``."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise RPNodeError(f"{path}: not a checkpoint file")
    pos = len(MAGIC)
    (n,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    header = json.loads(raw[pos:pos + n])
    data = raw[pos + n:]
    cfg = config_io.from_text(header["config"])
    model = make_model(cfg, seed=0)
    dt = _dtype(cfg.dtype)
    state = {}
    for e in header["tensors"]:
        arr = np.frombuffer(data[e["offset"]:e["offset"] + e["nbytes"]], dtype="<f8").reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.copy()).to(dt)
    model.load_state_dict(state)
    return model, cfg, dict(step=header["step"], rng=header["rng"])


# -- experiments ------------------------------------------------------------------

def load_data(cfg: RunConfig):
    if cfg.data_root:
        return load_dataset(cfg.data_root)
    return generate_synthetic(cfg.data)


def train_model(cfg: RunConfig, dataset, seed, log_path=None):
    trainer = Trainer(cfg, seed)
    trainer.fit(EpisodeSampler(dataset["train"]), log_path=log_path)
    return trainer


def default_attacks(epsilons=None):
    """FGSM (eps 0.02) and 10-step PGD (eps 0.01) on both sides."""
    specs = []
    for target in ("query", "support"):
        specs.append(AttackSpec("fgsm", target, 0.02))
        specs.append(AttackSpec("pgd", target, 0.01, iterations=10))
    return specs


def run_experiment(cfg: RunConfig, out_dir, variants=None, attacks=None, dataset=None,
                   split="test"):
    """Train every variant for every seed, evaluate clean and attacked, write reports.

    Writes ``<out>/<variant>/{config.ini, metrics.csv, train_seed<s>.csv,
    checkpoint_seed<s>.ckpt}`` and ``<out>/summary.{csv,txt}``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = variants or [cfg.model_variant]
    attacks = default_attacks() if attacks is None else attacks
    dataset = dataset if dataset is not None else load_data(cfg)
    sampler = EpisodeSampler(dataset[split])
    summary = []
    for variant in variants:
        vcfg = cfg.replace(model_variant=variant)
        vdir = out / variant
        vdir.mkdir(exist_ok=True)
        config_io.save(vcfg, vdir / "config.ini")
        rows = []
        episodes = eval_episodes(sampler, vcfg)
        for seed in vcfg.seeds:
            trainer = train_model(vcfg, dataset, seed, vdir / f"train_seed{seed}.csv")
            save_checkpoint(vdir / f"checkpoint_seed{seed}.ckpt", trainer.model, vcfg, trainer.step,
                            dict(base_seed=seed, step=trainer.step))
            for spec in [None, *attacks]:
                res = evaluate_episodes(trainer.model, episodes, spec)
                rows += metric_rows(res, seed, spec)
        write_metrics(rows, vdir / "metrics.csv")
        summary += summarize(rows, variant)
    _write_summary(summary, out)
    return summary


def summarize(rows, variant):
    """Mean and std across seeds of the per-seed dice means."""
    groups = {}
    for r in rows:
        key = (r["attack"], r["target"], r["eps"], r["iters"], r["organ_class"])
        groups.setdefault(key, []).append(float(r["dice_mean"]))
    return [dict(variant=variant, attack=k[0], target=k[1], eps=k[2], iters=k[3], organ_class=k[4],
                 dice_mean=float(np.mean(v)), dice_std=float(np.std(v)), n_seeds=len(v))
            for k, v in groups.items()]


def _write_summary(summary, out):
    cols = ["variant", "attack", "target", "eps", "iters", "organ_class", "dice_mean", "dice_std", "n_seeds"]
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols, lineterminator="\n")
        w.writeheader()
        for r in summary:
            w.writerow({**r, "dice_mean": repr(r["dice_mean"]), "dice_std": repr(r["dice_std"])})
    (out / "summary.txt").write_text(format_table(summary))


def format_table(summary):
    """Method rows x (attack, target, eps) columns, 'mean ± std' rounded to two decimals."""
    cols = []
    for r in summary:
        key = (r["attack"], r["target"], r["eps"])
        if key not in cols:
            cols.append(key)
    classes = sorted({r["organ_class"] for r in summary})
    buf = io.StringIO()
    for c in classes:
        buf.write(f"class {c}\n")
        heads = ["clean" if a == "clean" else f"{a}/{t} eps={float(e):g}" for a, t, e in cols]
        buf.write(" | ".join(["variant".ljust(18)] + [h.ljust(20) for h in heads]) + "\n")
        variants = []
        for r in summary:
            if r["variant"] not in variants:
                variants.append(r["variant"])
        for v in variants:
            cells = []
            for key in cols:
                m = [r for r in summary if r["variant"] == v and r["organ_class"] == c
                     and (r["attack"], r["target"], r["eps"]) == key]
                cells.append((f"{m[0]['dice_mean']:.2f} ± {m[0]['dice_std']:.2f}" if m else "-").ljust(20))
            buf.write(" | ".join([v.ljust(18)] + cells) + "\n")
        buf.write("\n")
    return buf.getvalue()
