"""Multi-view attribute encoder: luma/chroma UNets, projection heads, fusion."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .color import KB, KR

ATTRIBUTES = ("lum", "chr")
VIEWS = ("g", "l")


@dataclass
class EncoderConfig:
    unet_depth: int = 3
    base_channels: int = 32
    global_dim: int = 64
    local_channels: int = 16
    proj_dim: int = 128
    local_grid: int = 8
    fusion_heads: int = 2
    shared_backbone: bool = False
    split_input: bool = True  # Y -> luma branch, CbCr -> chroma branch; False feeds RGB to both

    def __post_init__(self):
        for name in ("unet_depth", "base_channels", "global_dim", "local_channels",
                     "proj_dim", "local_grid", "fusion_heads"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


class AttributeFeatures(NamedTuple):
    e_lum_g: torch.Tensor   # B x G
    e_lum_l: torch.Tensor   # B x L x H x W
    e_chr_g: torch.Tensor
    e_chr_l: torch.Tensor


class AttributeEmbeddings(NamedTuple):
    z_lum_g: torch.Tensor   # B x P, unit norm
    z_lum_l: torch.Tensor   # B x P x g x g, unit norm per cell
    z_chr_g: torch.Tensor
    z_chr_l: torch.Tensor

    def get(self, attribute: str, view: str) -> torch.Tensor:
        return getattr(self, f"z_{attribute}_{view}")


class FusedPriors(NamedTuple):
    z_deg_g: torch.Tensor   # B x G
    z_deg_l: torch.Tensor   # B x L x H x W


def split_luma_chroma(x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """B x 3 x H x W gamma-encoded RGB -> (Y, CbCr), same arithmetic as color.py."""
    r, g, b = x[:, 0:1], x[:, 1:2], x[:, 2:3]
    y = g + KR * (r - g) + KB * (b - g)
    cb = (b - y) / (2.0 * (1.0 - KB))
    cr = (r - y) / (2.0 * (1.0 - KR))
    return y, torch.cat([cb, cr], dim=1)


def _conv_block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1), nn.LeakyReLU(0.2),
        nn.Conv2d(cout, cout, 3, padding=1), nn.LeakyReLU(0.2),
    )


class UNetEncoder(nn.Module):
    """UNet returning a pooled bottleneck vector and a full-resolution map."""

    def __init__(self, in_channels, base_channels, depth, global_dim, local_channels):
        super().__init__()
        self.depth = depth
        chans = [base_channels * 2 ** i for i in range(depth + 1)]
        self.inc = _conv_block(in_channels, chans[0])
        self.downs = nn.ModuleList(_conv_block(chans[i], chans[i + 1]) for i in range(depth))
        self.global_head = nn.Conv2d(chans[-1], global_dim, 1)
        self.up_reduce = nn.ModuleList(
            nn.Conv2d(chans[i + 1], chans[i], 1) for i in reversed(range(depth)))
        self.ups = nn.ModuleList(_conv_block(2 * chans[i], chans[i]) for i in reversed(range(depth)))
        self.local_head = nn.Conv2d(chans[0], local_channels, 1)

    def forward(self, x):
        skips = [self.inc(x)]
        h = skips[0]
        for down in self.downs:
            h = down(F.avg_pool2d(h, 2))
            skips.append(h)
        e_g = self.global_head(h).mean(dim=(2, 3))
        for reduce, up, skip in zip(self.up_reduce, self.ups, reversed(skips[:-1])):
            h = reduce(F.interpolate(h, scale_factor=2, mode="bilinear", align_corners=False))
            h = up(torch.cat([h, skip], dim=1))
        return e_g, self.local_head(h)


class ProjectionHead(nn.Module):
    """MLP applied to vectors (global view) or per grid cell (local view)."""

    def __init__(self, in_dim, out_dim, hidden=None, bias=True):
        super().__init__()
        if hidden:
            self.net = nn.Sequential(nn.Linear(in_dim, hidden, bias=bias), nn.ReLU(),
                                     nn.Linear(hidden, out_dim, bias=bias))
        else:
            self.net = nn.Linear(in_dim, out_dim, bias=bias)

    def forward(self, e):
        return self.net(e)


def l2_normalize(v: torch.Tensor, dim: int = -1, eps: float = 1e-12) -> torch.Tensor:
    return v / v.norm(dim=dim, keepdim=True).clamp_min(eps)


class GatedFusion(nn.Module):
    """Concatenate two branches, run multi-head convs, sum heads under sigmoid gates."""

    def __init__(self, channels, heads=2, kernel_size=1):
        super().__init__()
        self.channels, self.n_heads = channels, heads
        pad = kernel_size // 2
        self.heads = nn.Conv2d(2 * channels, heads * channels, kernel_size, padding=pad)
        self.gates = nn.Conv2d(2 * channels, heads * channels, kernel_size, padding=pad)

    def forward(self, a, b):
        x = torch.cat([a, b], dim=1)
        n, _, h, w = x.shape
        heads = self.heads(x).view(n, self.n_heads, self.channels, h, w)
        gates = torch.sigmoid(self.gates(x)).view(n, self.n_heads, self.channels, h, w)
        return (gates * heads).sum(dim=1)


class AttributeEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or EncoderConfig()
        args = (cfg.base_channels, cfg.unet_depth)
        lum_in, chr_in = (1, 2) if cfg.split_input else (3, 3)
        if cfg.shared_backbone:
            self.backbone = UNetEncoder(3, *args, 2 * cfg.global_dim, 2 * cfg.local_channels)
        else:
            self.lum_unet = UNetEncoder(lum_in, *args, cfg.global_dim, cfg.local_channels)
            self.chr_unet = UNetEncoder(chr_in, *args, cfg.global_dim, cfg.local_channels)
        self.proj = nn.ModuleDict({
            f"{c}_g": ProjectionHead(cfg.global_dim, cfg.proj_dim, hidden=cfg.global_dim)
            for c in ATTRIBUTES
        })
        self.proj.update({
            f"{c}_l": ProjectionHead(cfg.local_channels, cfg.proj_dim, hidden=cfg.global_dim)
            for c in ATTRIBUTES
        })
        self.fuse_g = GatedFusion(cfg.global_dim, cfg.fusion_heads, kernel_size=1)
        self.fuse_l = GatedFusion(cfg.local_channels, cfg.fusion_heads, kernel_size=3)
        self._init_weights()

    def _init_weights(self):
        # torch's default fan-in init shrinks the signal through the UNet until biases
        # dominate and every image embeds to the same direction
        for mod in self.modules():
            if isinstance(mod, (nn.Conv2d, nn.Linear)):
                nn.init.kaiming_normal_(mod.weight, a=0.2, nonlinearity="leaky_relu")
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)

    @property
    def multiple(self) -> int:
        return 2 ** self.cfg.unet_depth

    def encode(self, x: torch.Tensor) -> AttributeFeatures:
        if x.dim() != 4 or x.shape[1] != 3:
            raise ValueError(f"expected B x 3 x H x W input, got {tuple(x.shape)}")
        m = self.multiple
        if x.shape[2] % m or x.shape[3] % m:
            raise ValueError(f"spatial size {tuple(x.shape[2:])} not divisible by {m}; pad first")
        y, cbcr = split_luma_chroma(x) if self.cfg.split_input else (x, x)
        if self.cfg.shared_backbone:
            g, l = self.backbone(torch.cat([y, cbcr], dim=1) if self.cfg.split_input else x)
            gd, lc = self.cfg.global_dim, self.cfg.local_channels
            return AttributeFeatures(g[:, :gd], l[:, :lc], g[:, gd:], l[:, lc:])
        e_lum_g, e_lum_l = self.lum_unet(y)
        e_chr_g, e_chr_l = self.chr_unet(cbcr)
        return AttributeFeatures(e_lum_g, e_lum_l, e_chr_g, e_chr_l)

    def project(self, e: torch.Tensor, attribute: str, view: str) -> torch.Tensor:
        if attribute not in ATTRIBUTES or view not in VIEWS:
            raise ValueError(f"unknown attribute/view {attribute!r}/{view!r}")
        head = self.proj[f"{attribute}_{view}"]
        if view == "g":
            return l2_normalize(head(e), dim=-1)
        grid = min(self.cfg.local_grid, e.shape[-2], e.shape[-1])
        pooled = F.adaptive_avg_pool2d(e, grid)
        out = head(pooled.permute(0, 2, 3, 1))
        return l2_normalize(out, dim=-1).permute(0, 3, 1, 2)

    def embed(self, feats: AttributeFeatures) -> AttributeEmbeddings:
        return AttributeEmbeddings(
            self.project(feats.e_lum_g, "lum", "g"), self.project(feats.e_lum_l, "lum", "l"),
            self.project(feats.e_chr_g, "chr", "g"), self.project(feats.e_chr_l, "chr", "l"))

    def fuse(self, feats: AttributeFeatures, use_lum=True, use_chr=True,
             gated=True) -> FusedPriors:
        lg, ll, cg, cl = feats
        if not use_lum:
            lg, ll = torch.zeros_like(lg), torch.zeros_like(ll)
        if not use_chr:
            cg, cl = torch.zeros_like(cg), torch.zeros_like(cl)
        if not gated:
            return FusedPriors(0.5 * (lg + cg), 0.5 * (ll + cl))
        z_g = self.fuse_g(lg[:, :, None, None], cg[:, :, None, None])[:, :, 0, 0]
        return FusedPriors(z_g, self.fuse_l(ll, cl))

    def forward(self, x):
        feats = self.encode(x)
        return feats, self.fuse(feats)
