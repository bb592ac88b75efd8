"""Command-line entry point: ``rpnode <verb> [flags]``.

Every verb accepts ``--config`` (a run config file) plus flags that override
individual RunConfig fields. ``--set section.key=value`` reaches any field
without a dedicated flag. Outputs go under ``--out``, defaulting to
``$RPNODE_OUTPUT_ROOT`` (or ``./runs``).
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import config as config_io
from .attacks import AttackSpec
from .benchmark import benchmark_config
from .config import VARIANTS, RunConfig
from .episodes import EpisodeSampler, default_root, write_dataset
from .errors import RPNodeError
from .train import (Trainer, eval_episodes, evaluate_episodes, load_checkpoint, load_data, metric_rows,
                    run_experiment, save_checkpoint, write_metrics)

# flag -> dotted config key
FIELD_FLAGS = {
    "variant": "model_variant",
    "seeds": "seeds",
    "dtype": "dtype",
    "data_root": "data_root",
    "sat_epsilon": "sat_epsilon",
    "temperature": "temperature",
    "channels": "encoder.stage_channels",
    "downsample": "encoder.downsample_factor",
    "solver": "solver.method",
    "ode_steps": "solver.steps",
    "terminal_time": "solver.terminal_time",
    "sigma": "noise.sigma",
    "noise_mode": "noise.mode",
    "alpha": "weights.alpha",
    "beta": "weights.beta",
    "lr": "optimizer.lr",
    "momentum": "optimizer.momentum",
    "n_way": "episodes.n_way",
    "k_shot": "episodes.k_shot",
    "n_query": "episodes.n_query",
    "e_train": "episodes.e_train",
    "e_test": "episodes.e_test",
    "image_size": "data.image_size",
    "n_subjects": "data.n_subjects",
    "data_seed": "data.seed",
}


def _add_run_flags(p):
    p.add_argument("--config", type=Path, help="run config file to start from")
    p.add_argument("--benchmark", action="store_true",
                   help="start from the synthetic benchmark settings instead of the defaults")
    p.add_argument("--out", type=Path, default=None, help="output root (default: $RPNODE_OUTPUT_ROOT or ./runs)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override any config field; repeatable")
    g = p.add_argument_group("config fields")
    for flag, key in FIELD_FLAGS.items():
        g.add_argument("--" + flag.replace("_", "-"), dest=flag, default=None, metavar="VALUE",
                       help=f"sets {key}" + (f" ({', '.join(VARIANTS)})" if flag == "variant" else ""))


def _add_attack_flags(p):
    p.add_argument("--attack", choices=("fgsm", "bim", "pgd"), default="fgsm")
    p.add_argument("--target", choices=("query", "support"), default="query")
    p.add_argument("--eps", type=float, default=0.02)
    p.add_argument("--iters", type=int, default=1)
    p.add_argument("--step-size", type=float, default=None)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--attack-seed", type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog="rpnode", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("generate-data", help="write the synthetic benchmark as paired rasters")
    _add_run_flags(p)
    p.add_argument("--dest", type=Path, default=None, help="dataset directory (default: <out>/data)")

    p = sub.add_parser("train", help="train one variant for every configured seed")
    _add_run_flags(p)

    for verb, text in (("evaluate", "clean dice of a checkpoint"),
                       ("attack-eval", "dice of a checkpoint under one attack")):
        p = sub.add_parser(verb, help=text)
        _add_run_flags(p)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--split", default="test")
        p.add_argument("--metrics", type=Path, default=None,
                       help="metrics CSV to append to (default: next to the checkpoint)")
        if verb == "attack-eval":
            _add_attack_flags(p)

    p = sub.add_parser("ablate", help="train and evaluate several variants, write a summary table")
    _add_run_flags(p)
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.add_argument("--split", default="test")
    p.add_argument("--clean-only", action="store_true", help="skip the default attack grid")

    p = sub.add_parser("export-features", help="dump prototypes and query features of a few episodes as CSV")
    _add_run_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--episodes", type=int, default=4)
    p.add_argument("--dest", type=Path, default=None)
    return parser


def resolve_config(args, base: RunConfig = None) -> RunConfig:
    """``--config`` (else ``base``, else defaults) with flag and ``--set`` overrides applied."""
    overrides = {}
    for flag, key in FIELD_FLAGS.items():
        val = getattr(args, flag, None)
        if val is not None:
            overrides[key] = val
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise RPNodeError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        overrides[key.strip()] = val.strip()
    if args.config:
        text = args.config.read_text()
    elif getattr(args, "benchmark", False):
        text = config_io.to_text(benchmark_config())
    else:
        text = config_io.to_text(base or RunConfig())
    return config_io.from_text(text, overrides)


def _out_root(args):
    return args.out if args.out is not None else default_root()


def cmd_generate_data(args):
    cfg = resolve_config(args)
    dest = args.dest or _out_root(args) / "data"
    ds = load_data(cfg.replace(data_root=""))
    write_dataset(ds, dest)
    for split, subjects in ds.splits.items():
        print(f"{split}: {len(subjects)} subjects, {sum(len(s) for s in subjects)} slices, "
              f"classes {ds.classes_in(split)}")
    print(f"wrote {dest}")


def cmd_train(args):
    cfg = resolve_config(args)
    run_dir = _out_root(args) / cfg.model_variant
    run_dir.mkdir(parents=True, exist_ok=True)
    config_io.save(cfg, run_dir / "config.ini")
    dataset = load_data(cfg)
    sampler = EpisodeSampler(dataset["train"])
    for seed in cfg.seeds:
        trainer = Trainer(cfg, seed)
        hist = trainer.fit(sampler, log_path=run_dir / f"train_seed{seed}.csv")
        ckpt = run_dir / f"checkpoint_seed{seed}.ckpt"
        save_checkpoint(ckpt, trainer.model, cfg, trainer.step, dict(base_seed=seed, step=trainer.step))
        tail = hist[-min(len(hist), 50):]
        ce = np.mean([h["ce"] for h in tail]) if tail else float("nan")
        print(f"seed {seed}: {trainer.step} steps, recent ce {ce:.4f} -> {ckpt}")


def _evaluate_checkpoint(args, attack):
    model, ckpt_cfg, meta = load_checkpoint(args.checkpoint)
    # episode and data flags may override what the checkpoint recorded
    cfg = resolve_config(args, base=ckpt_cfg)
    dataset = load_data(cfg)
    if args.split not in dataset.splits:
        raise RPNodeError(f"split {args.split!r} not in dataset ({sorted(dataset.splits)})")
    episodes = eval_episodes(EpisodeSampler(dataset[args.split]), cfg)
    res = evaluate_episodes(model, episodes, attack)
    seed = meta["rng"].get("base_seed", 0)
    rows = metric_rows(res, seed, attack)
    metrics = args.metrics or args.checkpoint.parent / "metrics.csv"
    write_metrics(rows, metrics, append=True)
    for r in rows:
        print(f"class {r['organ_class']}: dice {float(r['dice_mean']):.2f} ± {float(r['dice_std']):.2f} "
              f"({r['n_episodes']} episodes, {r['attack']}/{r['target']} eps={r['eps']})")
    print(f"appended {len(rows)} rows to {metrics}")


def cmd_evaluate(args):
    _evaluate_checkpoint(args, None)


def cmd_attack_eval(args):
    spec = AttackSpec(args.attack, args.target, args.eps, args.iters, args.step_size,
                      args.attack_seed, restarts=args.restarts)
    _evaluate_checkpoint(args, spec)


def cmd_ablate(args):
    cfg = resolve_config(args)
    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    unknown = set(variants) - set(VARIANTS)
    if unknown:
        raise RPNodeError(f"unknown variants {sorted(unknown)}")
    out = _out_root(args)
    run_experiment(cfg, out, variants, [] if args.clean_only else None, split=args.split)
    print((out / "summary.txt").read_text())


def cmd_export_features(args):
    model, ckpt_cfg, _ = load_checkpoint(args.checkpoint)
    cfg = resolve_config(args, base=ckpt_cfg)
    dataset = load_data(cfg)
    sampler = EpisodeSampler(dataset[args.split])
    dest = args.dest or args.checkpoint.parent / "features"
    dest.mkdir(parents=True, exist_ok=True)
    e = cfg.episodes
    model.eval()
    with open(dest / "prototypes.csv", "w", newline="") as pf, \
            open(dest / "query_features.csv", "w", newline="") as ff:
        pw, fw = csv.writer(pf, lineterminator="\n"), csv.writer(ff, lineterminator="\n")
        d = model.encoder.out_channels
        pw.writerow(["episode", "class_id"] + [f"f{i}" for i in range(d)])
        fw.writerow(["episode", "query", "y", "x", "label"] + [f"f{i}" for i in range(d)])
        for i in range(args.episodes):
            ep = sampler.sample(e.n_way, e.k_shot, max(e.n_query, 1), seed=cfg.eval_seed + i)
            with torch.no_grad():
                zs, zq = model.features(ep.support_images), model.features(ep.query_images)
                hw = ep.support_images.shape[-2:]
                _, protos = model.predict_from_features(zs, ep.support_masks, zq, ep.class_ids, hw)
            for cid, vec in zip(protos.class_ids, protos.vectors.double().tolist()):
                pw.writerow([i, cid] + [repr(v) for v in vec])
            # query features at feature-map resolution, labelled by the mask at cell centres
            for qi, (z, m) in enumerate(zip(zq.double(), ep.query_masks)):
                _, h, w = z.shape
                sy, sx = m.shape[0] // h, m.shape[1] // w
                for y in range(h):
                    for x in range(w):
                        lab = int(m[y * sy + sy // 2, x * sx + sx // 2])
                        fw.writerow([i, qi, y, x, lab] + [repr(v) for v in z[:, y, x].tolist()])
    print(f"wrote {dest / 'prototypes.csv'} and {dest / 'query_features.csv'}")


COMMANDS = {
    "generate-data": cmd_generate_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "attack-eval": cmd_attack_eval,
    "ablate": cmd_ablate,
    "export-features": cmd_export_features,
}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.verb](args)
    except (RPNodeError, ValueError, OSError) as exc:
        print(f"rpnode {args.verb}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
