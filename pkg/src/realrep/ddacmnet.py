"""Degradation-conditioned mapping network.

Head conv -> N dense (channel-wise) controlled blocks -> N sparse (pixel-wise)
controlled blocks -> detail refinement. Conditioning enters only through
``ControlConv`` layers; in ``zero`` mode those hold exact zeros, which makes
every modulation the identity regardless of the priors.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

CONTROL_MODES = ("standard", "zero")


@dataclass
class DDACMConfig:
    n_blocks: int = 4
    feat_channels: int = 32
    n_res: int = 4
    control_mode: str = "standard"
    global_dim: int = 64
    local_channels: int = 16
    scm_hidden: int = 32
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.n_blocks < 1:
            raise ValueError("n_blocks must be >= 1")
        if self.feat_channels <= 0:
            raise ValueError("feat_channels must be positive")
        if self.n_res < 0:
            raise ValueError("n_res must be >= 0")
        if self.control_mode not in CONTROL_MODES:
            raise ValueError(f"control_mode must be one of {CONTROL_MODES}")


class MappingOutputs(NamedTuple):
    i_dcm: torch.Tensor   # B x 3 x H x W readout after the dense stage
    i_scm: torch.Tensor   # B x C x H x W features after the sparse stage
    i_hdr: torch.Tensor   # B x 3 x H x W in [0, 1]


class ControlConv(nn.Conv2d):
    """Convolution on the prior path that can be reset to exact zeros."""

    def reset(self, mode: str):
        if mode == "zero":
            with torch.no_grad():
                self.weight.zero_()
                if self.bias is not None:
                    self.bias.zero_()
        elif mode == "standard":
            self.reset_parameters()
        else:
            raise ValueError(f"unknown control mode {mode!r}")


def param_free_layer_norm(x, eps):
    return F.layer_norm(x, x.shape[1:], eps=eps)


def _body(c):
    return nn.Sequential(nn.Conv2d(c, c, 3, padding=1), nn.LeakyReLU(0.2),
                         nn.Conv2d(c, c, 3, padding=1))


class DCMBlock(nn.Module):
    def __init__(self, channels, global_dim, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.ctrl_gamma = ControlConv(global_dim, channels, 1)
        self.ctrl_beta = ControlConv(global_dim, channels, 1)
        self.body = _body(channels)

    def affine(self, z_deg_g):
        z = z_deg_g[:, :, None, None]
        return self.ctrl_gamma(z), self.ctrl_beta(z)

    def modulate(self, feat, z_deg_g):
        normed = param_free_layer_norm(feat, self.eps)
        if z_deg_g is None:
            return normed
        if z_deg_g.shape[1] != self.ctrl_gamma.in_channels:
            raise ValueError(f"global prior has {z_deg_g.shape[1]} dims, "
                             f"expected {self.ctrl_gamma.in_channels}")
        d_gamma, d_beta = self.affine(z_deg_g)
        return (1 + d_gamma) * normed + d_beta

    def forward(self, feat, z_deg_g):
        return feat + self.body(self.modulate(feat, z_deg_g))


class SCMBlock(nn.Module):
    def __init__(self, channels, local_channels, hidden=32, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.shared = nn.Conv2d(local_channels, hidden, 1)
        # replicate padding keeps a spatially constant prior spatially constant
        self.ctrl_gamma = ControlConv(hidden, channels, 3, padding=1, padding_mode="replicate")
        self.ctrl_beta = ControlConv(hidden, channels, 3, padding=1, padding_mode="replicate")
        self.body = _body(channels)

    def affine(self, z_deg_l):
        h = F.relu(self.shared(z_deg_l))
        return self.ctrl_gamma(h), self.ctrl_beta(h)

    def modulate(self, feat, z_deg_l):
        normed = param_free_layer_norm(feat, self.eps)
        if z_deg_l is None:
            return normed
        if z_deg_l.shape[-2:] != feat.shape[-2:]:
            raise ValueError(f"local prior size {tuple(z_deg_l.shape[-2:])} != "
                             f"feature size {tuple(feat.shape[-2:])}")
        d_gamma, d_beta = self.affine(z_deg_l)
        return (1 + d_gamma) * normed + d_beta

    def forward(self, feat, z_deg_l):
        return feat + self.body(self.modulate(feat, z_deg_l))


class ResBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.body = nn.Sequential(nn.Conv2d(channels, channels, 3, padding=1), nn.ReLU(),
                                  nn.Conv2d(channels, channels, 3, padding=1))

    def forward(self, x):
        return x + self.body(x)


class DetailRefine(nn.Module):
    def __init__(self, channels, n_res, out_channels=3):
        super().__init__()
        self.conv_in = nn.Conv2d(channels, channels, 3, padding=1)
        self.blocks = nn.Sequential(*[ResBlock(channels) for _ in range(n_res)])
        self.conv_out = nn.Conv2d(channels, out_channels, 3, padding=1)

    def forward(self, i_scm):
        return self.conv_out(self.blocks(self.conv_in(i_scm))).clamp(0.0, 1.0)


class DDACMNet(nn.Module):
    def __init__(self, cfg: DDACMConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or DDACMConfig()
        c = cfg.feat_channels
        self.head = nn.Conv2d(3, c, 3, padding=1)
        self.dcm = nn.ModuleList(DCMBlock(c, cfg.global_dim, cfg.ln_eps)
                                 for _ in range(cfg.n_blocks))
        self.dcm_readout = nn.Conv2d(c, 3, 3, padding=1)
        self.scm = nn.ModuleList(SCMBlock(c, cfg.local_channels, cfg.scm_hidden, cfg.ln_eps)
                                 for _ in range(cfg.n_blocks))
        self.refine = DetailRefine(c, cfg.n_res)
        if cfg.control_mode == "zero":
            set_control_mode(self, "zero")

    def dense_stage(self, feat, z_deg_g):
        for block in self.dcm:
            feat = block(feat, z_deg_g)
        return feat

    def sparse_stage(self, feat, z_deg_l):
        for block in self.scm:
            feat = block(feat, z_deg_l)
        return feat

    def forward(self, x, z_deg_g, z_deg_l) -> MappingOutputs:
        """``None`` for a prior skips that stage's conditioning entirely."""
        feat = self.dense_stage(self.head(x), z_deg_g)
        i_dcm = self.dcm_readout(feat)
        i_scm = self.sparse_stage(feat, z_deg_l)
        return MappingOutputs(i_dcm, i_scm, self.refine(i_scm))


def control_layers(net: nn.Module) -> list[ControlConv]:
    return [m for m in net.modules() if isinstance(m, ControlConv)]


def control_parameter_names(net: nn.Module) -> set[str]:
    names = set()
    for mod_name, mod in net.named_modules():
        if isinstance(mod, ControlConv):
            names.update(f"{mod_name}.{p}" if mod_name else p for p, _ in mod.named_parameters())
    return names


def set_control_mode(net: nn.Module, mode: str, seed: int | None = None) -> None:
    """Re-initialise every control layer; other parameters are left untouched."""
    if mode not in CONTROL_MODES:
        raise ValueError(f"control mode must be one of {CONTROL_MODES}, got {mode!r}")
    layers = control_layers(net)
    if seed is None:
        for layer in layers:
            layer.reset(mode)
    else:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for layer in layers:
                layer.reset(mode)
    if isinstance(getattr(net, "cfg", None), DDACMConfig):
        net.cfg.control_mode = mode
