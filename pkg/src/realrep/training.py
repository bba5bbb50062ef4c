"""Two-stage training loop, loss, model EMA and checkpoints."""

from __future__ import annotations

import copy
import csv
import hashlib
import io
import logging
import math
from contextlib import nullcontext
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import color
from .color import EncodedImage
from .config import TrainConfig
from .contrastive import (ContrastiveBatchInputs, MomentumEncoder, apply_dihedral,
                          choose_dihedral, contrastive_loss, enabled_terms, invert_dihedral,
                          momentum_update)
from .ddacmnet import set_control_mode
from .degradations import DatasetManifest, hdr_to_pq
from .imageio import read_linear, read_png
from .model import RealRep
from .negatives import build_bank_for_batch

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "realrep-checkpoint"
CHECKPOINT_VERSION = 1


class NumericalError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


def l1(a, b):
    return (a - b).abs().mean()


def total_loss(i_hdr_pred, i_dcm, gt, l_contra, cfg: TrainConfig):
    """Mean-reduced L1 on the final and dense-stage outputs plus the contrastive term."""
    if i_hdr_pred.shape != gt.shape or i_dcm.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {tuple(i_hdr_pred.shape)}, "
                         f"dcm {tuple(i_dcm.shape)}, gt {tuple(gt.shape)}")
    if not torch.is_tensor(l_contra):
        l_contra = torch.tensor(float(l_contra), dtype=i_hdr_pred.dtype)
    parts = {
        "hdr": l1(i_hdr_pred, gt),
        "dcm": cfg.lambda_l * l1(i_dcm, gt),
        "contra": cfg.lambda_contra * l_contra,
    }
    bad = [name for name, value in parts.items() if not torch.isfinite(value).all()]
    if bad:
        raise NumericalError(f"non-finite loss components {bad}: "
                             + ", ".join(f"{k}={float(v)}" for k, v in parts.items()))
    total = parts["hdr"] + parts["dcm"] + parts["contra"]
    return total, {k: float(v.detach()) for k, v in parts.items()}


@torch.no_grad()
def ema_update(live, shadow, d: float = 0.999):
    """``shadow <- d * shadow + (1 - d) * live`` for modules or tensor lists."""
    if isinstance(live, torch.nn.Module):
        live = list(live.parameters())
    if isinstance(shadow, torch.nn.Module):
        shadow = list(shadow.parameters())
    return momentum_update(shadow, live, d)


def ema_decay_at(step: int, decay: float, warmup: bool = True) -> float:
    """Effective EMA decay after ``step`` updates.

    With warm-up the decay ramps as (1 + t) / (10 + t) until it reaches ``decay``,
    so short runs are not dominated by the random initialisation.
    """
    return min(decay, (1.0 + step) / (10.0 + step)) if warmup else decay


def psnr_torch(pred, gt):
    mse = ((pred - gt) ** 2).mean().item()
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


# --- data -------------------------------------------------------------------

def _to_chw(a):
    return torch.from_numpy(np.ascontiguousarray(a.transpose(2, 0, 1)))


class TrainData:
    """Everything training touches, held in memory as tensors.

    ``sdr``: N x O x 3 x H x W, ``gt``: N x 3 x H x W (PQ), and per-anchor
    negatives ``neg_l`` / ``neg_c``: N x O x K x 3 x H x W.
    """

    def __init__(self, manifest: DatasetManifest, operators=None, k_l=4, k_c=4, bank=None):
        ops = list(operators) if operators else sorted(manifest.operator_ids() or
                                                       manifest.entries[0].sdr_paths)
        entries = [e for e in manifest.entries if all(op in e.sdr_paths for op in ops)]
        if not entries:
            raise ValueError("manifest has no entries covering the training operators")
        self.ops, self.ids = ops, [e.id for e in entries]
        images = {e.id: {op: EncodedImage(read_png(e.sdr_paths[op])) for op in ops}
                  for e in entries}
        self.sdr = torch.stack([torch.stack([_to_chw(images[e.id][op].pixels) for op in ops])
                                for e in entries])
        self.gt = torch.stack([_to_chw(hdr_to_pq(read_linear(e.hdr_path)).pixels)
                               for e in entries])
        self.k_l = min(k_l, len(ops) - 1)
        self.k_c = min(k_c, len(ops) - 1)
        self.neg_l = self.neg_c = None
        if len(ops) > 1 and (self.k_l or self.k_c):
            if bank is None:
                sub = manifest.restrict(ops)
                sub.entries = [e for e in sub.entries if e.id in images]
                bank = build_bank_for_batch(sub, self.k_l, self.k_c, images=images)
            self.neg_l = self._stack_bank(bank, "n_l", self.k_l)
            self.neg_c = self._stack_bank(bank, "n_c", self.k_c)

    def _stack_bank(self, bank, attr, k):
        per_entry = []
        for eid in self.ids:
            per_op = []
            for op in self.ops:
                imgs = getattr(bank[(eid, op)], attr)[:k]
                per_op.append(torch.stack([_to_chw(im.pixels) for im in imgs]))
            per_entry.append(torch.stack(per_op))
        return torch.stack(per_entry)

    def __len__(self):
        return len(self.ids)


@dataclass
class Batch:
    x: torch.Tensor
    gt: torch.Tensor
    entry: np.ndarray
    op: np.ndarray
    neg_l: torch.Tensor | None = None
    neg_c: torch.Tensor | None = None


def sample_batch(data: TrainData, rng: np.random.Generator, batch: int, patch: int = 0,
                 with_negatives: bool = False) -> Batch:
    n, o = data.sdr.shape[:2]
    h, w = data.sdr.shape[-2:]
    idx = rng.integers(n, size=batch)
    ops = rng.integers(o, size=batch)
    size = patch if patch and patch < min(h, w) else None
    offs = [(int(rng.integers(h - size + 1)), int(rng.integers(w - size + 1))) if size else (0, 0)
            for _ in range(batch)]

    def crop(t):
        if size is None:
            return t
        return torch.stack([t[b, ..., y:y + size, x:x + size] for b, (y, x) in enumerate(offs)])

    x = crop(data.sdr[idx, ops])
    gt = crop(data.gt[idx])
    out = Batch(x, gt, idx, ops)
    if with_negatives and data.neg_l is not None:
        out.neg_l = crop(data.neg_l[idx, ops])
        out.neg_c = crop(data.neg_c[idx, ops])
    return out


# --- state ------------------------------------------------------------------

@dataclass
class TrainState:
    cfg: TrainConfig
    model: RealRep
    ema: RealRep
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.MultiStepLR
    data_rng: np.random.Generator
    aug_rng: np.random.Generator
    iteration: int = 0
    stage: str = "one"
    momentum: MomentumEncoder | None = None
    history: list = field(default_factory=list)


def build_model(cfg: TrainConfig) -> RealRep:
    return RealRep(cfg.encoder_config(), cfg.mapper_config(), cfg.ablation())


def init_state(cfg: TrainConfig) -> TrainState:
    cfg.validate()
    torch.manual_seed(cfg.seed)
    model = build_model(cfg).to(cfg.device)
    ema = copy.deepcopy(model)
    for p in ema.parameters():
        p.requires_grad_(False)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=tuple(cfg.betas))
    sched = torch.optim.lr_scheduler.MultiStepLR(opt, milestones=list(cfg.milestones),
                                                 gamma=cfg.decay)
    return TrainState(cfg, model, ema, opt, sched,
                      np.random.default_rng([cfg.seed, 1]), np.random.default_rng([cfg.seed, 2]))


def enter_stage_two(state: TrainState) -> None:
    """Stage boundary: zero the control layers and start the momentum encoder."""
    cfg = state.cfg
    if not cfg.no_control:
        set_control_mode(state.model.mapper, "zero")
        set_control_mode(state.ema.mapper, "zero")
    if not cfg.no_contra:
        state.momentum = MomentumEncoder(state.model.encoder, cfg.momentum)
    state.stage = "two"


def _embed_batch(encoder, x):
    return encoder.embed(encoder.encode(x))


def contrastive_step(state: TrainState, batch: Batch, anchor_feats) -> torch.Tensor:
    cfg, model = state.cfg, state.model
    ab = model.ablation
    terms = enabled_terms(not ab.no_z_lum, not ab.no_z_chr)
    if not terms or batch.neg_l is None:
        return torch.zeros((), dtype=batch.x.dtype)
    anchors = model.encoder.embed(anchor_feats)
    square = batch.x.shape[-1] == batch.x.shape[-2]
    tids = [choose_dihedral(state.aug_rng, square) for _ in range(batch.x.shape[0])]
    pos_x = torch.stack([apply_dihedral(img, t) for img, t in zip(batch.x, tids)])
    b, kl, kc = batch.x.shape[0], batch.neg_l.shape[1], batch.neg_c.shape[1]
    key_enc = state.momentum.module
    with torch.no_grad():
        pos = _embed_batch(key_enc, pos_x)
        neg_l = _embed_batch(key_enc, batch.neg_l.flatten(0, 1))
        neg_c = _embed_batch(key_enc, batch.neg_c.flatten(0, 1))

    def unflip(z):
        return torch.stack([invert_dihedral(zz, t) for zz, t in zip(z, tids)])

    def group(z, k):
        return z.reshape(b, k, *z.shape[1:])

    a_d = {f"{c}_{s}": anchors.get(c, s) for c in ("lum", "chr") for s in ("g", "l")}
    p_d = {f"{c}_g": pos.get(c, "g") for c in ("lum", "chr")}
    p_d.update({f"{c}_l": unflip(pos.get(c, "l")) for c in ("lum", "chr")})
    n_d = {f"lum_{s}": group(neg_l.get("lum", s), kl) for s in ("g", "l")}
    n_d.update({f"chr_{s}": group(neg_c.get("chr", s), kc) for s in ("g", "l")})
    return contrastive_loss(ContrastiveBatchInputs(a_d, p_d, n_d, cfg.temperature, terms))


def train_step(state: TrainState, data: TrainData) -> dict:
    cfg, model = state.cfg, state.model
    if state.iteration == cfg.stage1_iters and state.stage == "one":
        enter_stage_two(state)
    use_contra = state.stage == "two" and not cfg.no_contra
    batch = sample_batch(data, state.data_rng, cfg.batch, cfg.patch, with_negatives=use_contra)
    model.train()
    amp = (torch.autocast(device_type=batch.x.device.type, dtype=torch.bfloat16)
           if cfg.mixed_precision else nullcontext())
    with amp:
        out = model(batch.x.to(cfg.device))
        l_contra = (contrastive_step(state, batch, out.features) if use_contra
                    else torch.zeros((), dtype=batch.x.dtype))
    loss, parts = total_loss(out.mapping.i_hdr.float(), out.mapping.i_dcm.float(),
                             batch.gt.to(cfg.device), l_contra.float(), cfg)
    lr = state.optimizer.param_groups[0]["lr"]
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    state.optimizer.step()
    state.scheduler.step()
    if state.momentum is not None:
        state.momentum.update(model.encoder)
    ema_update(model, state.ema, ema_decay_at(state.iteration, cfg.ema_decay, cfg.ema_warmup))
    record = {"iteration": state.iteration, "stage": state.stage, "lr": lr,
              "loss": loss.item(), **{f"loss_{k}": v for k, v in parts.items()}}
    state.iteration += 1
    return record


def probe_batch(data: TrainData, size: int) -> tuple[torch.Tensor, torch.Tensor]:
    n = min(size, len(data))
    return data.sdr[:n, 0], data.gt[:n]


@torch.no_grad()
def probe_outputs(model: RealRep, x: torch.Tensor) -> torch.Tensor:
    model.eval()
    return model(x).mapping.i_hdr


LOG_FIELDS = ["iteration", "stage", "lr", "loss", "loss_hdr", "loss_dcm", "loss_contra",
              "probe_psnr"]


def train(cfg: TrainConfig, manifest: DatasetManifest, bank=None, run_dir=None,
          state: TrainState | None = None, callback=None) -> TrainState:
    """Run both stages to ``cfg.total_iters``; returns the final state.

    Writes ``train_log.csv``, ``last.ckpt`` (and periodic checkpoints) under
    ``run_dir`` when given. ``callback(state, record)`` runs after each step.
    """
    cfg.validate()
    if not manifest.entries:
        raise ValueError("empty manifest")
    train_manifest = manifest.split("train") if any(e.split == "train" for e in
                                                    manifest.entries) else manifest
    data = TrainData(train_manifest, cfg.train_operators or None, cfg.k_l, cfg.k_c, bank)
    state = state or init_state(cfg)
    probe_x, probe_gt = probe_batch(data, cfg.probe_size)
    run_dir = Path(run_dir) if run_dir else None
    writer = None
    if run_dir:
        run_dir.mkdir(parents=True, exist_ok=True)
        log_path = run_dir / "train_log.csv"
        fh = open(log_path, "a" if state.iteration else "w", newline="")
        writer = csv.DictWriter(fh, LOG_FIELDS)
        if not state.iteration:
            writer.writeheader()
    try:
        while state.iteration < cfg.total_iters:
            try:
                record = train_step(state, data)
            except NumericalError:
                log.error("training diverged at iteration %d; last checkpoint kept",
                          state.iteration)
                raise
            it = record["iteration"]
            if cfg.log_every and (it % cfg.log_every == 0 or it == cfg.total_iters - 1):
                record["probe_psnr"] = psnr_torch(probe_outputs(state.model, probe_x), probe_gt)
                log.info("it %d stage %s lr %.2e loss %.5f (hdr %.5f dcm %.5f contra %.5f) "
                         "probe %.2f dB", it, record["stage"], record["lr"], record["loss"],
                         record["loss_hdr"], record["loss_dcm"], record["loss_contra"],
                         record["probe_psnr"])
            state.history.append(record)
            if writer:
                writer.writerow({k: record.get(k, "") for k in LOG_FIELDS})
            if run_dir and cfg.ckpt_every and state.iteration % cfg.ckpt_every == 0:
                save_checkpoint(state, run_dir / f"iter_{state.iteration:07d}.ckpt")
                save_checkpoint(state, run_dir / "last.ckpt")
            if callback:
                callback(state, record)
    finally:
        if writer:
            fh.close()
    if run_dir:
        save_checkpoint(state, run_dir / "last.ckpt")
    return state


# --- checkpoints ------------------------------------------------------------

def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "config": state.cfg.to_dict(),
        "model_hash": state.cfg.model_hash(),
        "iteration": state.iteration,
        "stage": state.stage,
        "model": state.model.state_dict(),
        "ema": state.ema.state_dict(),
        "momentum": state.momentum.module.state_dict() if state.momentum else None,
        "optimizer": state.optimizer.state_dict(),
        "scheduler": state.scheduler.state_dict(),
        "data_rng": state.data_rng.bit_generator.state,
        "aug_rng": state.aug_rng.bit_generator.state,
        "torch_rng": torch.get_rng_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    digest = hashlib.sha256(blob).hexdigest().encode()
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(digest + b"\n" + blob)
    tmp.replace(path)
    return path


def read_checkpoint(path) -> dict:
    raw = Path(path).read_bytes()
    head, sep, blob = raw.partition(b"\n")
    if not sep or len(head) != 64 or hashlib.sha256(blob).hexdigest().encode() != head:
        raise CheckpointError(f"{path}: corrupt or truncated checkpoint")
    try:
        payload = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"{path}: cannot deserialize checkpoint: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a realrep checkpoint")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return payload


def load_checkpoint(path, expected_hash: str | None = None) -> TrainState:
    payload = read_checkpoint(path)
    cfg = TrainConfig(**payload["config"])
    if cfg.model_hash() != payload["model_hash"]:
        raise CheckpointError(f"{path}: stored config does not match its model hash")
    if expected_hash is not None and expected_hash != payload["model_hash"]:
        raise CheckpointError(f"{path}: model hash {payload['model_hash']} != expected "
                              f"{expected_hash}")
    state = init_state(cfg)
    if payload["stage"] == "two":
        enter_stage_two(state)
    state.model.load_state_dict(payload["model"])
    state.ema.load_state_dict(payload["ema"])
    if payload["momentum"] is not None:
        if state.momentum is None:
            state.momentum = MomentumEncoder(state.model.encoder, cfg.momentum)
        state.momentum.module.load_state_dict(payload["momentum"])
    state.optimizer.load_state_dict(payload["optimizer"])
    state.scheduler.load_state_dict(payload["scheduler"])
    state.data_rng.bit_generator.state = payload["data_rng"]
    state.aug_rng.bit_generator.state = payload["aug_rng"]
    torch.set_rng_state(payload["torch_rng"])
    state.iteration = payload["iteration"]
    state.stage = payload["stage"]
    return state


def load_model(path, use_ema: bool = True, expected_hash: str | None = None) -> RealRep:
    """Inference model from a checkpoint (EMA weights by default)."""
    payload = read_checkpoint(path)
    cfg = TrainConfig(**payload["config"])
    if expected_hash is not None and expected_hash != payload["model_hash"]:
        raise CheckpointError(f"{path}: model hash {payload['model_hash']} != expected "
                              f"{expected_hash}")
    model = RealRep(cfg.encoder_config(), cfg.mapper_config(), cfg.ablation())
    model.load_state_dict(payload["ema" if use_ema else "model"])
    model.train_operators = list(cfg.train_operators)
    model.eval()
    return model


def naive_baseline(sdr: np.ndarray) -> np.ndarray:
    return color.sdr_to_naive_hdr(sdr)
