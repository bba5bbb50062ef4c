"""InfoNCE over the four attribute/view embeddings, positives, momentum encoder."""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .color import EncodedImage
from .encoder import ATTRIBUTES, VIEWS

# dihedral transforms as (k quarter turns, flip left-right)
DIHEDRAL = [(k, f) for f in (False, True) for k in range(4)]
IDENTITY = 0


def info_nce_term(anchor, pos, negs, temperature: float = 1.0):
    """-log(e^{a.p} / (e^{a.p} + sum_j e^{a.n_j})), batched.

    ``anchor`` and ``pos`` are ``... x D``, ``negs`` is ``... x K x D``. Returns
    the per-element loss with shape ``...``.
    """
    if negs.shape[-2] < 1:
        raise ValueError("InfoNCE needs at least one negative")
    pos_logit = (anchor * pos).sum(-1, keepdim=True)
    neg_logits = torch.einsum("...d,...kd->...k", anchor, negs)
    logits = torch.cat([pos_logit, neg_logits], dim=-1) / temperature
    return torch.logsumexp(logits, dim=-1) - logits[..., 0]


def _flatten_local(z):
    # B x D x g x g -> B x g*g x D ; negatives B x K x D x g x g -> B x g*g x K x D
    if z.dim() == 4:
        return z.flatten(2).transpose(1, 2)
    return z.flatten(3).permute(0, 3, 1, 2)


@dataclass
class ContrastiveBatchInputs:
    """Per (attribute, view) embeddings keyed ``"lum_g"``, ``"chr_l"`` ...

    anchors / positives: ``B x D`` (global) or ``B x D x g x g`` (local);
    negatives: ``B x K x D`` or ``B x K x D x g x g``.
    """

    anchors: dict
    positives: dict
    negatives: dict
    temperature: float = 1.0
    terms: tuple = field(default=tuple(f"{c}_{s}" for c in ATTRIBUTES for s in VIEWS))


def contrastive_terms(batch: ContrastiveBatchInputs) -> dict:
    out = {}
    for key in batch.terms:
        if key not in batch.anchors or key not in batch.positives or key not in batch.negatives:
            raise KeyError(f"missing embeddings for contrastive term {key!r}")
        a, p, n = batch.anchors[key], batch.positives[key], batch.negatives[key]
        if key.endswith("_l"):
            a, p, n = _flatten_local(a), _flatten_local(p), _flatten_local(n)
        # local terms: mean over grid cells, then over the batch
        out[key] = info_nce_term(a, p, n, batch.temperature).mean()
    return out


def contrastive_loss(batch: ContrastiveBatchInputs) -> torch.Tensor:
    terms = contrastive_terms(batch)
    return torch.stack(list(terms.values())).sum()


def enabled_terms(use_lum=True, use_chr=True, use_global=True, use_local=True) -> tuple:
    attrs = [c for c, on in zip(ATTRIBUTES, (use_lum, use_chr)) if on]
    views = [s for s, on in zip(VIEWS, (use_global, use_local)) if on]
    return tuple(f"{c}_{s}" for c in attrs for s in views)


# --- positives --------------------------------------------------------------

def apply_dihedral(x, index: int):
    """Apply transform ``index`` to the last two axes (torch) or first two (numpy HWC)."""
    k, flip = DIHEDRAL[index]
    if isinstance(x, torch.Tensor):
        if flip:
            x = torch.flip(x, dims=(-1,))
        return torch.rot90(x, k, dims=(-2, -1))
    if flip:
        x = x[:, ::-1]
    return np.ascontiguousarray(np.rot90(x, k, axes=(0, 1)))


def invert_dihedral(x, index: int):
    k, flip = DIHEDRAL[index]
    if isinstance(x, torch.Tensor):
        x = torch.rot90(x, -k, dims=(-2, -1))
        return torch.flip(x, dims=(-1,)) if flip else x
    x = np.rot90(x, -k, axes=(0, 1))
    return np.ascontiguousarray(x[:, ::-1] if flip else x)


def choose_dihedral(rng: np.random.Generator, square: bool = True) -> int:
    """Random non-identity transform; rotations by 90 degrees only for square inputs."""
    choices = [i for i, (k, f) in enumerate(DIHEDRAL)
               if i != IDENTITY and (square or k % 2 == 0)]
    return int(rng.choice(choices))


def make_positive(x: EncodedImage, seed) -> EncodedImage:
    """Geometric-only augmentation: flips and quarter turns, values untouched."""
    h, w = x.pixels.shape[:2]
    index = choose_dihedral(np.random.default_rng(seed), square=(h == w))
    return EncodedImage(apply_dihedral(x.pixels, index), x.encoding)


# --- momentum encoder -------------------------------------------------------

class MomentumEncoder:
    """Shadow copy of a module, updated as shadow <- m * shadow + (1 - m) * live."""

    def __init__(self, live: nn.Module, m: float = 0.999):
        if not 0.0 <= m <= 1.0:
            raise ValueError("momentum must lie in [0, 1]")
        self.m = m
        self.module = copy.deepcopy(live)
        for p in self.module.parameters():
            p.requires_grad_(False)
        self.module.eval()

    @torch.no_grad()
    def update(self, live: nn.Module, m: float | None = None):
        momentum_update(list(self.module.parameters()), list(live.parameters()),
                        self.m if m is None else m)

    def __call__(self, *args, **kwargs):
        return self.module(*args, **kwargs)


@torch.no_grad()
def momentum_update(shadow, live, m: float):
    """In-place ``shadow <- m * shadow + (1 - m) * live`` over matched tensors."""
    if not 0.0 <= m <= 1.0:
        raise ValueError("momentum must lie in [0, 1]")
    shadow, live = list(shadow), list(live)
    if len(shadow) != len(live):
        raise ValueError(f"{len(shadow)} shadow tensors vs {len(live)} live tensors")
    for s, l in zip(shadow, live):
        if s.shape != l.shape:
            raise ValueError(f"shape mismatch {tuple(s.shape)} vs {tuple(l.shape)}")
        if m == 1.0:
            continue
        if m == 0.0:
            s.copy_(l)
        else:
            s.mul_(m).add_(l, alpha=1.0 - m)
    return shadow
