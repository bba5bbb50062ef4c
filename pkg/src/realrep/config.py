"""Run configuration and the flat ``key = value`` config file format.

One key per line, ``#`` starts a comment, values are Python literals
(numbers, booleans, quoted strings, lists); bare words are read as strings.
Every key must be a ``TrainConfig`` field; unknown keys are rejected.
"""

from __future__ import annotations

import ast
import hashlib
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .ddacmnet import DDACMConfig
from .encoder import EncoderConfig
from .model import Ablation


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 0
    # optimisation
    lr: float = 2e-4
    betas: tuple = (0.9, 0.99)
    milestones: list = field(default_factory=lambda: [200000, 400000])
    decay: float = 0.5
    batch: int = 16
    total_iters: int = 400000
    stage1_iters: int = 40000
    lambda_l: float = 0.7
    lambda_contra: float = 0.2
    ema_decay: float = 0.999
    ema_warmup: bool = True
    momentum: float = 0.999
    temperature: float = 1.0
    k_l: int = 4
    k_c: int = 4
    mixed_precision: bool = False
    # ablations
    no_fusion: bool = False
    no_z_lum: bool = False
    no_z_chr: bool = False
    no_contra: bool = False
    no_global: bool = False
    no_local: bool = False
    no_control: bool = False
    # architecture
    unet_depth: int = 3
    base_channels: int = 32
    global_dim: int = 64
    local_channels: int = 16
    proj_dim: int = 128
    local_grid: int = 8
    fusion_heads: int = 2
    shared_backbone: bool = False
    split_input: bool = True
    n_blocks: int = 4
    feat_channels: int = 32
    n_res: int = 4
    scm_hidden: int = 32
    # data
    manifest: str = ""
    train_operators: list = field(default_factory=list)
    test_operators: list = field(default_factory=list)
    patch: int = 0
    # synthesis
    hdr_dir: str = ""
    synthetic_scenes: int = 32
    scene_size: int = 64
    operators: list = field(default_factory=lambda: ["reinhard", "bt2446a", "bt2390eetf",
                                                     "hable"])
    crop: int = 64
    test_fraction: float = 0.25
    workers: int = 1
    # bookkeeping
    log_every: int = 50
    ckpt_every: int = 0
    probe_size: int = 4
    psnr_domain: str = "pq"
    device: str = "cpu"

    def __post_init__(self):
        self.betas = tuple(self.betas)
        self.milestones = list(self.milestones)

    def validate(self) -> "TrainConfig":
        if self.stage1_iters >= self.total_iters:
            raise ConfigError(f"stage1_iters ({self.stage1_iters}) must be smaller than "
                              f"total_iters ({self.total_iters})")
        if self.stage1_iters < 0:
            raise ConfigError("stage1_iters must be nonnegative")
        if self.lambda_l < 0 or self.lambda_contra < 0:
            raise ConfigError("loss weights must be nonnegative")
        if not (0 <= self.ema_decay <= 1 and 0 <= self.momentum <= 1):
            raise ConfigError("ema_decay and momentum must lie in [0, 1]")
        if self.batch < 1 or self.lr <= 0 or self.temperature <= 0:
            raise ConfigError("batch, lr and temperature must be positive")
        if self.k_l < 0 or self.k_c < 0:
            raise ConfigError("k_l and k_c must be nonnegative")
        if len(self.betas) != 2:
            raise ConfigError("betas needs two values")
        if self.psnr_domain not in ("pq", "linear"):
            raise ConfigError("psnr_domain must be 'pq' or 'linear'")
        try:
            self.encoder_config()
            self.mapper_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        return self

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.unet_depth, self.base_channels, self.global_dim,
                             self.local_channels, self.proj_dim, self.local_grid,
                             self.fusion_heads, self.shared_backbone, self.split_input)

    def mapper_config(self) -> DDACMConfig:
        return DDACMConfig(self.n_blocks, self.feat_channels, self.n_res, "standard",
                           self.global_dim, self.local_channels, self.scm_hidden)

    def ablation(self) -> Ablation:
        return Ablation(**{name: getattr(self, name) for name in Ablation.names()})

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d

    def model_hash(self) -> str:
        """Hash of everything that shapes the network's parameters and forward pass."""
        keys = ["unet_depth", "base_channels", "global_dim", "local_channels", "proj_dim",
                "local_grid", "fusion_heads", "shared_backbone", "split_input", "n_blocks",
                "feat_channels", "n_res", "scm_hidden", *Ablation.names()]
        blob = json.dumps({k: getattr(self, k) for k in keys}, sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def replace(self, **overrides) -> "TrainConfig":
        return apply_overrides(self, overrides)


FIELD_TYPES = {f.name: f for f in fields(TrainConfig)}


def _coerce(key: str, value):
    default = getattr(TrainConfig(), key)
    if isinstance(default, str):
        if isinstance(value, str) and value[:1] in ("'", '"'):
            value = ast.literal_eval(value)
        return str(value)
    if isinstance(value, str):
        try:
            value = ast.literal_eval(value)
        except (ValueError, SyntaxError):
            if isinstance(default, list):
                value = [v.strip() for v in value.split(",") if v.strip()]
            elif isinstance(default, bool):
                low = value.strip().lower()
                if low not in ("true", "false", "yes", "no", "on", "off"):
                    raise ConfigError(f"{key}: cannot read {value!r} as a boolean")
                value = low in ("true", "yes", "on")
            else:
                raise ConfigError(f"{key}: cannot parse {value!r}")
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{key}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int):
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, (list, tuple)):
        if isinstance(value, (int, float, str)):
            value = [value]
        return type(default)(value)
    return str(value)


def apply_overrides(cfg: TrainConfig, overrides: dict) -> TrainConfig:
    values = cfg.to_dict()
    for key, value in overrides.items():
        if key not in FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = _coerce(key, value)
    return TrainConfig(**values)


def parse_config_text(text: str, base: TrainConfig | None = None) -> TrainConfig:
    overrides = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in overrides:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        overrides[key] = value
    return apply_overrides(base or TrainConfig(), overrides)


def load_config(path) -> TrainConfig:
    return parse_config_text(Path(path).read_text())


def parse_overrides(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def dump_config(cfg: TrainConfig) -> str:
    lines = []
    for key, value in cfg.to_dict().items():
        lines.append(f"{key} = {json.dumps(value) if not isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"
