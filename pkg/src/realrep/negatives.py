"""Luma-/chroma-aware negative exemplars.

For each anchor rendition, the other renditions of the same HDR source are
ranked by how far their luma (or chroma) planes sit from the anchor's. The
most distant ones donate that single attribute to a composite: the anchor
keeps everything else, so each negative differs from the anchor in exactly
one attribute.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .color import EncodedImage, SDR_ENCODING, YCbCrImage, rgb_to_ycbcr, ycbcr_to_rgb
from .imageio import read_png, write_png16

log = logging.getLogger(__name__)


@dataclass
class AnchorGroup:
    reference: EncodedImage
    candidates: list
    k_l: int = 4
    k_c: int = 4

    def __post_init__(self):
        if self.k_l < 0 or self.k_c < 0:
            raise ValueError("k_l and k_c must be nonnegative")
        shape = self.reference.pixels.shape
        for c in self.candidates:
            if c.pixels.shape != shape:
                raise ValueError(f"candidate shape {c.pixels.shape} != anchor shape {shape}")


@dataclass
class Selection:
    kind: str          # "lum" or "chr"
    candidate: int
    distance: float

    def to_dict(self):
        return {"kind": self.kind, "candidate": self.candidate, "distance": self.distance}


@dataclass
class NegativeBank:
    n_l: list = field(default_factory=list)
    n_c: list = field(default_factory=list)
    provenance: list = field(default_factory=list)
    # composites before the RGB conversion; these carry the exact attribute swap
    n_l_ycbcr: list = field(default_factory=list)
    n_c_ycbcr: list = field(default_factory=list)

    def lum_indices(self):
        return [s.candidate for s in self.provenance if s.kind == "lum"]

    def chr_indices(self):
        return [s.candidate for s in self.provenance if s.kind == "chr"]


def attribute_distances(ref: YCbCrImage, cand: YCbCrImage) -> tuple[float, float]:
    """Mean absolute luma difference and mean absolute chroma difference."""
    if ref.y.shape != cand.y.shape:
        raise ValueError(f"shape mismatch: {ref.y.shape} vs {cand.y.shape}")
    d_l = float(np.mean(np.abs(cand.y.astype(np.float64) - ref.y)))
    d_c = float(0.5 * (np.mean(np.abs(cand.cb.astype(np.float64) - ref.cb))
                       + np.mean(np.abs(cand.cr.astype(np.float64) - ref.cr))))
    return d_l, d_c


def _top_k(distances, k):
    # largest distance first, ties by ascending candidate index
    order = sorted(range(len(distances)), key=lambda i: (-distances[i], i))
    return order[:k]


def mine_negatives(group: AnchorGroup) -> NegativeBank:
    ref = rgb_to_ycbcr(group.reference)
    cands = [rgb_to_ycbcr(c) for c in group.candidates]
    dists = [attribute_distances(ref, c) for c in cands]
    d_l = [d[0] for d in dists]
    d_c = [d[1] for d in dists]

    bank = NegativeBank()
    enc = group.reference.encoding
    # the two selections are consumed independently; k_l and k_c may differ
    for i in _top_k(d_l, group.k_l):
        ycc = YCbCrImage(cands[i].y, ref.cb, ref.cr)
        bank.n_l_ycbcr.append(ycc)
        bank.n_l.append(ycbcr_to_rgb(ycc, enc))
        bank.provenance.append(Selection("lum", i, d_l[i]))
    for i in _top_k(d_c, group.k_c):
        ycc = YCbCrImage(ref.y, cands[i].cb, cands[i].cr)
        bank.n_c_ycbcr.append(ycc)
        bank.n_c.append(ycbcr_to_rgb(ycc, enc))
        bank.provenance.append(Selection("chr", i, d_c[i]))
    return bank


def load_renditions(entry) -> dict:
    return {op: EncodedImage(read_png(p), SDR_ENCODING) for op, p in sorted(entry.sdr_paths.items())}


def build_bank_for_batch(manifest, k_l: int = 4, k_c: int = 4, images=None) -> dict:
    """Negative banks for every (entry, operator) anchor in ``manifest``.

    ``images`` may map entry id -> {operator: EncodedImage} to skip disk reads.
    Keys of the result are ``(entry_id, operator_id)``; candidate indices in the
    provenance refer to the sorted list of the entry's other operators.
    """
    banks = {}
    for entry in manifest.entries:
        renditions = images[entry.id] if images is not None else load_renditions(entry)
        ops = sorted(renditions)
        if len(ops) < 2:
            log.warning("entry %s has a single degradation; no negatives", entry.id)
            continue
        for op in ops:
            others = [o for o in ops if o != op]
            group = AnchorGroup(renditions[op], [renditions[o] for o in others], k_l, k_c)
            bank = mine_negatives(group)
            bank.candidate_ids = others
            banks[(entry.id, op)] = bank
    return banks


def save_bank(banks: dict, out_dir) -> Path:
    """Per-anchor directories of composed negatives plus ``provenance.json``."""
    out_dir = Path(out_dir)
    index = {}
    for (entry_id, op), bank in sorted(banks.items()):
        anchor_dir = out_dir / f"{entry_id}__{op}"
        for j, img in enumerate(bank.n_l):
            write_png16(anchor_dir / f"lum_{j:02d}.png", img.pixels)
        for j, img in enumerate(bank.n_c):
            write_png16(anchor_dir / f"chr_{j:02d}.png", img.pixels)
        cand_ids = getattr(bank, "candidate_ids", None)
        prov = [{**s.to_dict(), **({"operator": cand_ids[s.candidate]} if cand_ids else {})}
                for s in bank.provenance]
        (anchor_dir / "provenance.json").write_text(json.dumps(prov, indent=2) + "\n")
        index[f"{entry_id}__{op}"] = prov
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "provenance.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return out_dir
