"""Synthetic organ slices, the on-disk raster layout, and episode sampling."""
from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DatasetError, InsufficientSlicesError

SPLITS = ("train", "val", "test")

# Shape family -> class id. Ids are fixed so checkpoints stay comparable.
FAMILY_IDS = {
    "ellipse": 1,
    "lobed_blob": 2,
    "bar": 3,
    "triangle": 4,
    "crescent": 5,
    "ring": 6,
}


@dataclass
class Subject:
    subject_id: str
    images: np.ndarray  # (S, H, W) float32 in [0, 1]
    masks: np.ndarray  # (S, H, W) uint8 class ids
    domain_tag: str = "source"

    @property
    def slices(self):
        return list(zip(self.images, self.masks))

    def __len__(self):
        return len(self.images)


@dataclass
class Dataset:
    splits: dict
    class_names: dict
    image_size: tuple

    def __getitem__(self, split):
        return self.splits[split]

    def classes_in(self, split):
        ids = set()
        for s in self.splits[split]:
            ids.update(int(c) for c in np.unique(s.masks) if c != 0)
        return sorted(ids)


@dataclass
class SynthConfig:
    image_size: tuple = (64, 64)
    train_families: tuple = ("ellipse", "lobed_blob", "bar", "triangle")
    novel_families: tuple = ("crescent", "ring")
    n_subjects: int = 24
    split_fractions: tuple = (1 / 2, 1 / 6, 1 / 3)
    slices_per_subject: int = 10
    organs_per_subject: int = 2
    # texture: smooth background noise (amplitude, correlation length in px) and pixel noise
    texture_amplitude: float = 0.06
    texture_scale: float = 2.0
    pixel_noise: float = 0.02
    intensity_jitter: float = 0.05
    # cross-domain variant: gamma curve plus extra correlated noise
    shift_gamma: float = 0.0
    shift_noise: float = 0.05
    # "class": each class has its own shape family; "random": shapes are drawn
    # per organ from all families, so only appearance identifies a class
    shape_mode: str = "class"
    seed: int = 0

    def __post_init__(self):
        self.image_size = tuple(int(v) for v in self.image_size)
        overlap = set(self.train_families) & set(self.novel_families)
        if overlap:
            raise DatasetError(f"train and novel families overlap: {sorted(overlap)}")
        for f in (*self.train_families, *self.novel_families):
            if f not in FAMILY_IDS:
                raise DatasetError(f"unknown shape family {f!r}")
        if self.shape_mode not in ("class", "random"):
            raise DatasetError(f"unknown shape_mode {self.shape_mode!r}")


def _class_intensity(class_id):
    # fixed, well-separated organ brightness per class
    return 0.42 + 0.08 * ((class_id * 3) % 7)


def _shape_mask(family, yy, xx, cy, cx, radius, angle, rng_params):
    dy, dx = yy - cy, xx - cx
    u = dx * math.cos(angle) + dy * math.sin(angle)
    v = -dx * math.sin(angle) + dy * math.cos(angle)
    r = np.hypot(u, v)
    phi = np.arctan2(v, u)
    if family == "ellipse":
        return (u / radius) ** 2 + (v / (0.65 * radius)) ** 2 <= 1.0
    if family == "lobed_blob":
        lobes, depth = rng_params
        return r <= radius * (1.0 + depth * np.cos(lobes * phi))
    if family == "bar":
        return (np.abs(u) <= 1.3 * radius) & (np.abs(v) <= 0.35 * radius)
    if family == "triangle":
        inside = np.ones_like(u, dtype=bool)
        for k in range(3):
            a = 2 * math.pi * k / 3
            inside &= u * math.cos(a) + v * math.sin(a) <= 0.6 * radius
        return inside
    if family == "crescent":
        return (r <= radius) & (np.hypot(u - 0.7 * radius, v) > 0.7 * radius)
    if family == "ring":
        return (r <= radius) & (r >= 0.45 * radius)
    raise DatasetError(f"unknown shape family {family!r}")


def _smooth_noise(rng, shape, scale):
    n = ndimage.gaussian_filter(rng.standard_normal(shape), scale, mode="wrap")
    return n / (n.std() + 1e-12)


def _make_subject(rng, cfg, subject_id, labelled, distractors, domain_tag):
    H, W = cfg.image_size
    S = cfg.slices_per_subject
    yy, xx = np.mgrid[0:H, 0:W].astype(np.float64)
    base = rng.uniform(0.12, 0.25)
    body = ((yy - H / 2) / (0.46 * H)) ** 2 + ((xx - W / 2) / (0.47 * W)) ** 2 <= 1.0

    organs = []
    families = list(rng.permutation(labelled))[: cfg.organs_per_subject]
    if distractors:
        families.append(distractors[rng.integers(len(distractors))])
    for fam in families:
        cid = FAMILY_IDS[fam]
        radius = rng.uniform(0.11, 0.16) * min(H, W)
        # rejection-sample a centre that keeps organs apart
        for _ in range(100):
            cy, cx = rng.uniform(0.22, 0.78) * H, rng.uniform(0.22, 0.78) * W
            if all(math.hypot(cy - o["cy"], cx - o["cx"]) > 1.15 * (radius + o["radius"]) for o in organs):
                break
        shape = fam if cfg.shape_mode == "class" else list(FAMILY_IDS)[rng.integers(len(FAMILY_IDS))]
        organs.append(dict(
            family=shape,
            label=cid if fam in labelled else 0,
            cy=cy, cx=cx,
            drift=rng.normal(0, 0.005 * H, size=2),
            radius=radius,
            angle=rng.uniform(0, 2 * math.pi),
            params=(int(rng.integers(3, 5)), rng.uniform(0.2, 0.35)),
            intensity=_class_intensity(cid) + rng.normal(0, cfg.intensity_jitter),
            centre=rng.uniform(0.3, 0.7) * (S - 1),
            extent=rng.uniform(0.6, 0.9) * S,
        ))

    images = np.empty((S, H, W), np.float32)
    masks = np.zeros((S, H, W), np.uint8)
    for s in range(S):
        img = np.where(body, base, 0.02)
        lab = np.zeros((H, W), np.uint8)
        for o in organs:
            zrel = (s - o["centre"]) / (o["extent"] / 2)
            if abs(zrel) >= 1:
                continue
            rad = o["radius"] * math.sqrt(1 - zrel ** 2)
            if rad < 2.0:
                continue
            cy = o["cy"] + o["drift"][0] * (s - o["centre"])
            cx = o["cx"] + o["drift"][1] * (s - o["centre"])
            m = _shape_mask(o["family"], yy, xx, cy, cx, rad, o["angle"], o["params"])
            img = np.where(m, o["intensity"], img)
            lab = np.where(m, o["label"], lab).astype(np.uint8)
        img = img + cfg.texture_amplitude * _smooth_noise(rng, (H, W), cfg.texture_scale) * body
        img = img + cfg.pixel_noise * rng.standard_normal((H, W))
        if domain_tag == "shifted":
            img = np.clip(img, 0, 1) ** cfg.shift_gamma
            img = img + cfg.shift_noise * _smooth_noise(rng, (H, W), 2 * cfg.texture_scale)
        images[s] = np.clip(img, 0.0, 1.0)
        masks[s] = lab
    keep = masks.reshape(S, -1).max(axis=1) > 0
    return Subject(subject_id, images[keep], masks[keep], domain_tag)


def generate_synthetic(cfg: SynthConfig = None) -> Dataset:
    """Deterministic train/val/test subjects; novel families only in test.

    Test slices may also show training-family organs, left unlabelled. With
    ``shift_gamma`` set, a ``test_shifted`` split adds freshly drawn test-like
    subjects rendered under an intensity/texture shift.
    """
    cfg = cfg or SynthConfig()
    rng = np.random.default_rng(cfg.seed)
    n = cfg.n_subjects
    n_train = max(1, round(n * cfg.split_fractions[0]))
    n_val = max(1, round(n * cfg.split_fractions[1]))
    n_test = max(1, n - n_train - n_val)
    counts = dict(train=n_train, val=n_val, test=n_test)
    train_fams, novel_fams = list(cfg.train_families), list(cfg.novel_families)

    splits = {}
    idx = 0
    for split in SPLITS:
        subjects = []
        for _ in range(counts[split]):
            sid = f"s{idx:03d}"
            idx += 1
            if split == "test":
                subjects.append(_make_subject(rng, cfg, sid, novel_fams, train_fams, "source"))
            else:
                subjects.append(_make_subject(rng, cfg, sid, train_fams, [], "source"))
        splits[split] = subjects
    if cfg.shift_gamma:
        shifted_rng = np.random.default_rng([cfg.seed, 1])
        splits["test_shifted"] = [
            _make_subject(shifted_rng, cfg, f"x{i:03d}", novel_fams, train_fams, "shifted")
            for i in range(n_test)]

    names = {FAMILY_IDS[f]: f for f in (*train_fams, *novel_fams)}
    return Dataset(splits, dict(sorted(names.items())), cfg.image_size)


# -- on-disk layout -----------------------------------------------------------
# root/<split>/index.txt
# root/<split>/<subject_id>/<slice_idx>.img   raw little-endian float32, H*W
# root/<split>/<subject_id>/<slice_idx>.msk   raw uint8 class ids, H*W

def write_dataset(dataset: Dataset, root):
    root = Path(root)
    H, W = dataset.image_size
    for split, subjects in dataset.splits.items():
        sdir = root / split
        sdir.mkdir(parents=True, exist_ok=True)
        lines = [f"image_size {H} {W}"]
        lines += [f"class {cid} {name}" for cid, name in dataset.class_names.items()]
        for subj in subjects:
            lines.append(f"subject {subj.subject_id} {len(subj)} {subj.domain_tag}")
            d = sdir / subj.subject_id
            d.mkdir(exist_ok=True)
            for i, (img, msk) in enumerate(subj.slices):
                (d / f"{i}.img").write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
                (d / f"{i}.msk").write_bytes(np.ascontiguousarray(msk, dtype=np.uint8).tobytes())
        (sdir / "index.txt").write_text("\n".join(lines) + "\n")


def _parse_index(path):
    size, classes, subjects = None, {}, []
    for lineno, raw in enumerate(path.read_text().splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        try:
            if parts[0] == "image_size" and len(parts) == 3:
                size = (int(parts[1]), int(parts[2]))
            elif parts[0] == "class" and len(parts) == 3:
                classes[int(parts[1])] = parts[2]
            elif parts[0] == "subject" and len(parts) in (3, 4):
                subjects.append((parts[1], int(parts[2]), parts[3] if len(parts) == 4 else "source"))
            else:
                raise ValueError("unrecognised entry")
        except ValueError as exc:
            raise DatasetError(f"{path}: line {lineno}: malformed entry {raw!r} ({exc})") from None
    if size is None:
        raise DatasetError(f"{path}: missing image_size entry")
    return size, classes, subjects


def load_dataset(root) -> Dataset:
    root = Path(root)
    splits, class_names, image_size = {}, {}, None
    split_dirs = sorted(p for p in root.iterdir() if (p / "index.txt").is_file())
    if not split_dirs:
        raise DatasetError(f"{root}: no <split>/index.txt found")
    for sdir in split_dirs:
        size, classes, entries = _parse_index(sdir / "index.txt")
        if image_size is not None and size != image_size:
            raise DatasetError(f"{sdir}: image size {size} differs from {image_size}")
        image_size = size
        class_names.update(classes)
        H, W = size
        subjects = []
        for sid, n, tag in entries:
            imgs = np.empty((n, H, W), np.float32)
            msks = np.empty((n, H, W), np.uint8)
            for i in range(n):
                ip, mp = sdir / sid / f"{i}.img", sdir / sid / f"{i}.msk"
                if not ip.is_file():
                    raise DatasetError(f"missing image {ip}")
                if not mp.is_file():
                    raise DatasetError(f"missing mask for image {ip} (expected {mp})")
                ib, mb = ip.read_bytes(), mp.read_bytes()
                if len(ib) != 4 * H * W or len(mb) != H * W:
                    raise DatasetError(f"{ip}: raster size does not match image_size {H}x{W}")
                imgs[i] = np.frombuffer(ib, dtype="<f4").reshape(H, W)
                msks[i] = np.frombuffer(mb, dtype=np.uint8).reshape(H, W)
                unknown = set(np.unique(msks[i]).tolist()) - set(classes) - {0}
                if unknown:
                    raise DatasetError(f"{mp}: unknown class ids {sorted(unknown)}")
            if imgs.size and (imgs.min() < 0 or imgs.max() > 1 or not np.isfinite(imgs).all()):
                lo, hi = float(np.nanmin(imgs)), float(np.nanmax(imgs))
                if hi > lo:
                    imgs = ((imgs - lo) / (hi - lo)).astype(np.float32)
                imgs = np.nan_to_num(np.clip(imgs, 0, 1)).astype(np.float32)
            subjects.append(Subject(sid, imgs, msks, tag))
        splits[sdir.name] = subjects
    return Dataset(splits, dict(sorted(class_names.items())), image_size)


# -- episodes -----------------------------------------------------------------

@dataclass
class Episode:
    class_ids: tuple
    support_images: np.ndarray  # (N*K, H, W)
    support_masks: np.ndarray  # (N*K, H, W), ids outside class_ids set to 0
    query_images: np.ndarray  # (N_Q, H, W)
    query_masks: np.ndarray
    support_keys: list = field(default_factory=list)  # (subject_id, slice index)
    query_keys: list = field(default_factory=list)
    seed: int = 0

    @property
    def n_way(self):
        return len(self.class_ids)

    def with_images(self, support=None, query=None):
        return Episode(self.class_ids,
                       self.support_images if support is None else support,
                       self.support_masks,
                       self.query_images if query is None else query,
                       self.query_masks, self.support_keys, self.query_keys, self.seed)


class EpisodeSampler:
    """N-way K-shot sampler over one split; precomputes per-class slice pools."""

    def __init__(self, subjects):
        self.subjects = list(subjects)
        self.keys = [(si, i) for si, s in enumerate(self.subjects) for i in range(len(s))]
        self.pools = {}
        for k, (si, i) in enumerate(self.keys):
            for c in np.unique(self.subjects[si].masks[i]):
                if c:
                    self.pools.setdefault(int(c), []).append(k)
        self.pools = {c: np.asarray(v) for c, v in sorted(self.pools.items())}

    @property
    def classes(self):
        return list(self.pools)

    def _gather(self, idx, class_ids):
        imgs = np.stack([self.subjects[self.keys[k][0]].images[self.keys[k][1]] for k in idx]) \
            if len(idx) else np.empty((0,) + self._shape(), np.float32)
        msks = np.stack([self.subjects[self.keys[k][0]].masks[self.keys[k][1]] for k in idx]) \
            if len(idx) else np.empty((0,) + self._shape(), np.uint8)
        msks = np.where(np.isin(msks, class_ids), msks, 0).astype(np.uint8)
        keys = [(self.subjects[self.keys[k][0]].subject_id, self.keys[k][1]) for k in idx]
        return imgs, msks, keys

    def _shape(self):
        return self.subjects[0].images.shape[1:]

    def sample(self, n_way=1, k_shot=1, n_query=1, class_filter=None, seed=0) -> Episode:
        rng = np.random.default_rng(seed)
        candidates = [c for c in self.pools if class_filter is None or c in set(class_filter)]
        # classes too small for K support + N_Q query slices are never drawn
        allowed = [c for c in candidates if len(self.pools[c]) >= k_shot + n_query]
        if len(allowed) < n_way:
            short = {c: len(self.pools[c]) for c in candidates if c not in allowed}
            raise InsufficientSlicesError(
                f"need {n_way} classes with {k_shot} support + {n_query} query slices; "
                f"only {allowed} qualify (too few slices: {short})")
        class_ids = tuple(sorted(int(c) for c in rng.choice(allowed, size=n_way, replace=False)))
        support, used = [], set()
        for c in class_ids:
            pool = [k for k in self.pools[c] if k not in used]
            if len(pool) < k_shot:
                raise InsufficientSlicesError(f"class {c}: not enough unused slices for {k_shot} shots")
            pick = rng.choice(pool, size=k_shot, replace=False)
            support.extend(int(k) for k in pick)
            used.update(int(k) for k in pick)
        qpool = sorted({int(k) for c in class_ids for k in self.pools[c]} - used)
        if len(qpool) < n_query:
            raise InsufficientSlicesError(f"classes {class_ids}: not enough slices left for {n_query} queries")
        query = [int(k) for k in rng.choice(qpool, size=n_query, replace=False)] if n_query else []
        s_img, s_msk, s_keys = self._gather(support, class_ids)
        q_img, q_msk, q_keys = self._gather(query, class_ids)
        return Episode(class_ids, s_img, s_msk, q_img, q_msk, s_keys, q_keys, seed)


def sample_episode(dataset_split, n_way=1, k_shot=1, n_query=1, class_filter=None, seed=0) -> Episode:
    sampler = dataset_split if isinstance(dataset_split, EpisodeSampler) else EpisodeSampler(dataset_split)
    return sampler.sample(n_way, k_shot, n_query, class_filter, seed)


def default_root():
    return Path(os.environ.get("RPNODE_OUTPUT_ROOT", "runs"))
