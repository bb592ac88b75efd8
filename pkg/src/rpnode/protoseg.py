"""Prototype extraction by masked average pooling and cosine-softmax prediction."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import ConfigurationError, MissingClassError

log = logging.getLogger(__name__)

BACKGROUND = 0


@dataclass
class PrototypeSet:
    """Prototype vectors stacked row-wise, background first.

    ``class_ids[i]`` labels ``vectors[i]``; channel ``i`` of a probability map
    built from this set refers to the same class.
    """
    class_ids: tuple
    vectors: torch.Tensor

    def __post_init__(self):
        self.class_ids = tuple(int(c) for c in self.class_ids)
        if len(set(self.class_ids)) != len(self.class_ids):
            raise ConfigurationError(f"duplicate class ids {self.class_ids}")
        if self.vectors.dim() != 2 or self.vectors.shape[0] != len(self.class_ids):
            raise ConfigurationError("vectors must be (n_classes, d)")

    @property
    def dim(self):
        return self.vectors.shape[1]

    def __getitem__(self, class_id):
        return self.vectors[self.class_ids.index(class_id)]


def upsample_features(z: torch.Tensor, target_hw) -> torch.Tensor:
    """Bilinear, corner-aligned resize of (..., C, H', W') features to ``target_hw``."""
    th, tw = int(target_hw[0]), int(target_hw[1])
    h, w = z.shape[-2:]
    if th < h or tw < w:
        raise ConfigurationError(f"cannot upsample {h}x{w} to smaller size {th}x{tw}")
    if (th, tw) == (h, w):
        return z
    squeeze = z.dim() == 3
    x = z.unsqueeze(0) if squeeze else z
    out = F.interpolate(x, size=(th, tw), mode="bilinear", align_corners=True)
    return out[0] if squeeze else out


def _as_list(x, single_dim):
    if isinstance(x, torch.Tensor) and x.dim() == single_dim:
        return [x]
    return list(x)


def _pool(z_list, selections):
    total, used = None, 0
    for z, sel in zip(_as_list(z_list, 3), selections):
        count = sel.sum()
        if count == 0:
            continue
        avg = (z * sel.to(z.dtype)).sum(dim=(-2, -1)) / count.to(z.dtype)
        total = avg if total is None else total + avg
        used += 1
    return total, used


def masked_average_pool(z_list, masks, class_id) -> torch.Tensor:
    """Mean over shots of the per-shot mean feature on pixels labelled ``class_id``.

    Shots with no pixel of the class are left out of the outer mean.
    """
    masks = _as_list(masks, 2)
    total, used = _pool(z_list, [m == class_id for m in masks])
    if used == 0:
        raise MissingClassError(f"class {class_id} is absent from every support mask")
    return total / used


def background_prototype(z_list, masks, foreground_ids=None) -> torch.Tensor:
    """Mean feature over locations not labelled with any foreground class."""
    masks = _as_list(masks, 2)
    if foreground_ids is None:
        sel = [m == BACKGROUND for m in masks]
    else:
        fg = torch.tensor(list(foreground_ids))
        sel = [~torch.isin(m, fg.to(m.dtype)) for m in masks]
    total, used = _pool(z_list, sel)
    if used == 0:
        raise MissingClassError("no background pixels in any support mask")
    return total / used


def compute_prototypes(z_list, masks, class_ids) -> PrototypeSet:
    class_ids = [int(c) for c in class_ids]
    vecs = [background_prototype(z_list, masks, class_ids)]
    vecs += [masked_average_pool(z_list, masks, c) for c in class_ids]
    return PrototypeSet((BACKGROUND, *class_ids), torch.stack(vecs))


def cosine_logits(query_z: torch.Tensor, prototypes: PrototypeSet) -> torch.Tensor:
    """Cosine similarity of every pixel with every prototype, (..., n_classes, H, W).

    Pairs where either vector has zero norm score 0.
    """
    p = prototypes.vectors
    if query_z.shape[-3] != p.shape[1]:
        raise ConfigurationError(
            f"feature dim {query_z.shape[-3]} does not match prototype dim {p.shape[1]}")
    dots = torch.einsum("...dhw,nd->...nhw", query_z, p)
    zn = query_z.norm(dim=-3, keepdim=True)
    pn = p.norm(dim=1).view(-1, 1, 1)
    denom = zn * pn
    ok = denom > 0
    if not bool(ok.all()):
        log.debug("zero-norm feature or prototype; cosine set to 0 for %d pairs", int((~ok).sum()))
    return torch.where(ok, dots / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(dots))


def predict(query_z: torch.Tensor, prototypes: PrototypeSet, temperature: float = 20.0) -> torch.Tensor:
    """Per-pixel softmax over classes of temperature-scaled cosine similarity."""
    return torch.softmax(temperature * cosine_logits(query_z, prototypes), dim=-3)


def argmax_mask(probs: torch.Tensor, class_ids=None) -> torch.Tensor:
    """Most probable class per pixel; ties go to the lowest channel."""
    # torch.argmax returns the first maximal index
    idx = torch.argmax(probs, dim=-3)
    if class_ids is None:
        return idx
    lut = torch.tensor(list(class_ids), dtype=torch.long)
    return lut[idx]


def export_prototypes_csv(prototypes: PrototypeSet, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["class_id"] + [f"f{i}" for i in range(prototypes.dim)])
        for cid, vec in zip(prototypes.class_ids, prototypes.vectors.detach().double().tolist()):
            w.writerow([cid] + [repr(v) for v in vec])
