"""End-to-end SDR -> HDR model: attribute encoder, fusion, controlled mapping."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .ddacmnet import DDACMConfig, DDACMNet, MappingOutputs
from .encoder import AttributeEncoder, AttributeFeatures, EncoderConfig, FusedPriors


@dataclass
class Ablation:
    no_fusion: bool = False
    no_z_lum: bool = False
    no_z_chr: bool = False
    no_contra: bool = False
    no_global: bool = False
    no_local: bool = False
    no_control: bool = False

    @classmethod
    def names(cls) -> list[str]:
        return [f.name for f in fields(cls)]


class ModelOutputs(NamedTuple):
    mapping: MappingOutputs
    features: AttributeFeatures
    priors: FusedPriors


class RealRep(nn.Module):
    def __init__(self, enc_cfg: EncoderConfig | None = None, map_cfg: DDACMConfig | None = None,
                 ablation: Ablation | None = None):
        super().__init__()
        enc_cfg = enc_cfg or EncoderConfig()
        map_cfg = map_cfg or DDACMConfig(global_dim=enc_cfg.global_dim,
                                         local_channels=enc_cfg.local_channels)
        if (map_cfg.global_dim, map_cfg.local_channels) != (enc_cfg.global_dim,
                                                            enc_cfg.local_channels):
            raise ValueError("mapping prior sizes must match the encoder outputs")
        self.ablation = ablation or Ablation()
        self.encoder = AttributeEncoder(enc_cfg)
        self.mapper = DDACMNet(map_cfg)

    @property
    def multiple(self) -> int:
        return self.encoder.multiple

    def priors(self, x) -> tuple[AttributeFeatures, FusedPriors]:
        ab = self.ablation
        feats = self.encoder.encode(x)
        priors = self.encoder.fuse(feats, use_lum=not ab.no_z_lum, use_chr=not ab.no_z_chr,
                                   gated=not ab.no_fusion)
        return feats, priors

    def forward(self, x) -> ModelOutputs:
        feats, priors = self.priors(x)
        ab = self.ablation
        mapping = self.mapper(x, None if ab.no_global else priors.z_deg_g,
                              None if ab.no_local else priors.z_deg_l)
        return ModelOutputs(mapping, feats, priors)

    def config_dict(self) -> dict:
        return {"encoder": asdict(self.encoder.cfg), "mapper": asdict(self.mapper.cfg),
                "ablation": asdict(self.ablation)}


def pad_to_multiple(x: torch.Tensor, multiple: int):
    """Reflect-pad B x C x H x W so H and W divide ``multiple``; returns (padded, (h, w))."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % multiple, (-w) % multiple
    if ph or pw:
        if ph >= h or pw >= w:
            x = F.pad(x, (0, pw, 0, ph), mode="replicate")
        else:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")
    return x, (h, w)


@torch.no_grad()
def predict(model: RealRep, sdr: np.ndarray) -> np.ndarray:
    """H x W x 3 gamma SDR in [0, 1] -> H x W x 3 PQ HDR prediction in [0, 1]."""
    model.eval()
    param = next(model.parameters())
    x = torch.from_numpy(np.ascontiguousarray(sdr.transpose(2, 0, 1)))[None]
    x, (h, w) = pad_to_multiple(x.to(param.dtype).to(param.device), model.multiple)
    out = model(x).mapping.i_hdr[0, :, :h, :w]
    return out.permute(1, 2, 0).cpu().double().numpy().clip(0.0, 1.0)
