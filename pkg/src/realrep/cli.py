"""Command line: synthesize / mine / train / infer / eval / export-embeddings."""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from .config import ConfigError, TrainConfig, apply_overrides, dump_config, load_config, parse_overrides
from .degradations import (ConfigurationError, DatasetError, DatasetManifest, synthesize_dataset,
                           write_synthetic_sources)

log = logging.getLogger("realrep")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4
SUBCOMMANDS = ("synthesize", "mine", "train", "infer", "eval", "export-embeddings")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override one config key (repeatable)")
    common.add_argument("--seed", type=int)
    common.add_argument("--out-dir", type=Path,
                        help="run directory (default: $REALREP_RUN_DIR/<command>-<time>)")
    common.add_argument("--device", help="torch device hint, e.g. cpu or cuda")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="realrep", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synthesize", parents=[common], help="render SDR renditions + manifest")
    p = sub.add_parser("mine", parents=[common], help="build luma/chroma negative banks")
    p.add_argument("--manifest", type=Path)
    p = sub.add_parser("train", parents=[common], help="two-stage training")
    p.add_argument("--manifest", type=Path)
    p.add_argument("--resume", type=Path, help="checkpoint to continue from")
    p = sub.add_parser("infer", parents=[common], help="SDR PNG -> 16-bit PQ PNG")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--in", dest="inp", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--live", action="store_true", help="use live instead of EMA weights")
    p = sub.add_parser("eval", parents=[common], help="PSNR / SSIM / Delta E ITP report")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="test", choices=("train", "test", "all"))
    p = sub.add_parser("export-embeddings", parents=[common], help="z_deg_g dump + t-SNE")
    p.add_argument("--ckpt", type=Path, required=True)
    p.add_argument("--manifest", type=Path)
    p.add_argument("--split", default="all", choices=("train", "test", "all"))
    p.add_argument("--perplexity", type=float, default=50.0)
    p.add_argument("--pca", type=int, default=16)
    return parser


def resolve_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config else TrainConfig()
    overrides = parse_overrides(args.overrides)
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.device:
        overrides["device"] = args.device
    if getattr(args, "manifest", None):
        overrides["manifest"] = str(args.manifest)
    return apply_overrides(cfg, overrides) if overrides else cfg


def make_run_dir(args) -> Path:
    if args.out_dir:
        run_dir = args.out_dir
    else:
        root = Path(os.environ.get("REALREP_RUN_DIR", "runs"))
        run_dir = root / f"{args.command}-{time.strftime('%Y%m%d-%H%M%S')}"
    run_dir.mkdir(parents=True, exist_ok=True)
    return run_dir


def _setup_logging(verbosity: int, run_dir: Path):
    level = logging.WARNING - 10 * min(verbosity, 2) if verbosity else logging.INFO
    root = logging.getLogger()
    root.setLevel(level)
    for h in list(root.handlers):
        if getattr(h, "_realrep", False):
            root.removeHandler(h)
    fmt = logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s")
    for handler in (logging.StreamHandler(sys.stderr),
                    logging.FileHandler(run_dir / "run.log")):
        handler.setFormatter(fmt)
        handler._realrep = True
        root.addHandler(handler)


def _manifest(cfg: TrainConfig) -> DatasetManifest:
    if not cfg.manifest:
        raise ConfigError("no manifest given (use --manifest or set manifest = ...)")
    return DatasetManifest.load(cfg.manifest)


def cmd_synthesize(cfg, args, run_dir):
    hdr_dir = Path(cfg.hdr_dir) if cfg.hdr_dir else None
    if hdr_dir is None:
        hdr_dir = run_dir / "sources"
        write_synthetic_sources(hdr_dir, cfg.synthetic_scenes, cfg.scene_size, cfg.seed)
        log.info("generated %d procedural HDR scenes in %s", cfg.synthetic_scenes, hdr_dir)
    manifest = synthesize_dataset(hdr_dir, cfg.operators, run_dir, cfg.crop or None, cfg.seed,
                                  cfg.test_fraction, cfg.workers)
    log.info("manifest: %d entries x %d operators -> %s", len(manifest.entries),
             len(cfg.operators), run_dir / "manifest.json")


def cmd_mine(cfg, args, run_dir):
    from .negatives import build_bank_for_batch, save_bank

    manifest = _manifest(cfg)
    if cfg.train_operators:
        manifest = manifest.restrict(cfg.train_operators)
    banks = build_bank_for_batch(manifest, cfg.k_l, cfg.k_c)
    save_bank(banks, run_dir / "bank")
    log.info("mined negatives for %d anchors -> %s", len(banks), run_dir / "bank")


def cmd_train(cfg, args, run_dir):
    from .training import load_checkpoint, train

    manifest = _manifest(cfg)
    state = None
    if args.resume:
        state = load_checkpoint(args.resume, expected_hash=cfg.model_hash())
    state = train(cfg, manifest, run_dir=run_dir, state=state)
    log.info("finished at iteration %d; checkpoint %s", state.iteration, run_dir / "last.ckpt")


def cmd_infer(cfg, args, run_dir):
    from .imageio import read_png, write_png16
    from .model import predict
    from .training import load_model

    model = load_model(args.ckpt, use_ema=not args.live)
    sdr = read_png(args.inp)
    h, w = sdr.shape[:2]
    if h % model.multiple or w % model.multiple:
        log.info("input %dx%d not divisible by %d: reflect-padding, output cropped back",
                 w, h, model.multiple)
    write_png16(args.out, predict(model, sdr))
    log.info("wrote %s", args.out)


def cmd_eval(cfg, args, run_dir):
    from .evaluation import evaluate
    from .training import load_model

    model = load_model(args.ckpt)
    manifest = _manifest(cfg)
    ops = (cfg.train_operators or []) + (cfg.test_operators or [])
    report = evaluate(model, manifest, args.split, operators=ops or None)
    report.write(run_dir)
    log.info("average: %s", report.average)


def cmd_export(cfg, args, run_dir):
    from .evaluation import export_embeddings
    from .training import load_model

    model = load_model(args.ckpt)
    dump = export_embeddings(model, _manifest(cfg), run_dir / "embeddings.csv", args.split,
                             None, args.pca, args.perplexity, cfg.seed)
    log.info("exported %d embeddings", len(dump.ids))


COMMANDS = {"synthesize": cmd_synthesize, "mine": cmd_mine, "train": cmd_train,
            "infer": cmd_infer, "eval": cmd_eval, "export-embeddings": cmd_export}


def run(argv=None) -> int:
    from .training import CheckpointError, NumericalError

    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args).validate()
    except (ConfigError, OSError) as exc:
        print(f"realrep: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    run_dir = make_run_dir(args)
    _setup_logging(args.verbose, run_dir)
    (run_dir / "config.txt").write_text(dump_config(cfg))
    log.info("command %s, seed %d, run dir %s", args.command, cfg.seed, run_dir)
    log.info("resolved config:\n%s", dump_config(cfg))
    try:
        COMMANDS[args.command](cfg, args, run_dir)
    except (ConfigError, ConfigurationError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, FileNotFoundError, ValueError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NumericalError, FloatingPointError) as exc:
        log.error("numeric error: %s", exc)
        return EXIT_NUMERIC
    return EXIT_OK


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
