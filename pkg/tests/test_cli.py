import subprocess
import sys

import cv2
import numpy as np
import pytest

from realrep.cli import run
from realrep.degradations import DatasetManifest, write_synthetic_sources
from realrep.evaluation import ground_truth, psnr
from realrep.imageio import read_png, write_png16
from realrep.training import naive_baseline

TINY = ["unet_depth=2", "base_channels=4", "global_dim=8", "local_channels=4", "proj_dim=8",
        "n_blocks=1", "feat_channels=8", "n_res=1", "scm_hidden=8", "batch=2", "log_every=0"]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


@pytest.fixture(scope="module")
def cli_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    write_synthetic_sources(root / "hdr", 4, 32, seed=2)
    cfg = root / "c.cfg"
    cfg.write_text(f"hdr_dir = {root / 'hdr'}\noperators = [\"reinhard\", \"hable\"]\n"
                   "crop = 16\n")
    assert run(["synthesize", "--config", str(cfg), "--out-dir", str(root / "data")]) == 0
    return root


def test_synthesize_counts(cli_data):
    data = cli_data / "data"
    assert len(list((data / "sdr").rglob("*.png"))) == 8
    m = DatasetManifest.load(data / "manifest.json")
    assert len(m.entries) == 4
    assert (data / "config.txt").exists() and (data / "run.log").exists()
    assert "seed" in (data / "config.txt").read_text()


def test_train_infer_eval_export(cli_data, tmp_path):
    manifest = str(cli_data / "data" / "manifest.json")
    run_dir = tmp_path / "train"
    code = run(["train", "--manifest", manifest, "--out-dir", str(run_dir), "--seed", "1",
                *sets(TINY + ["total_iters=4", "stage1_iters=2", "milestones=[3]"])])
    assert code == 0 and (run_dir / "last.ckpt").exists()
    ckpt = str(run_dir / "last.ckpt")

    sdr = np.random.default_rng(0).random((20, 28, 3))
    write_png16(tmp_path / "in.png", sdr)
    outs = []
    for name in ("a.png", "b.png"):
        assert run(["infer", "--ckpt", ckpt, "--in", str(tmp_path / "in.png"),
                    "--out", str(tmp_path / name), "--out-dir", str(tmp_path / "inf")]) == 0
        outs.append((tmp_path / name).read_bytes())
    assert outs[0] == outs[1]
    raw = cv2.imread(str(tmp_path / "a.png"), cv2.IMREAD_UNCHANGED)
    assert raw.dtype == np.uint16 and raw.shape == (20, 28, 3)

    assert run(["eval", "--ckpt", ckpt, "--manifest", manifest, "--split", "all",
                "--out-dir", str(tmp_path / "ev")]) == 0
    assert (tmp_path / "ev" / "report.json").exists()
    assert run(["export-embeddings", "--ckpt", ckpt, "--manifest", manifest,
                "--out-dir", str(tmp_path / "emb")]) == 0
    assert len((tmp_path / "emb" / "embeddings.csv").read_text().splitlines()) == 9


def test_mine(cli_data, tmp_path):
    assert run(["mine", "--manifest", str(cli_data / "data" / "manifest.json"),
                "--out-dir", str(tmp_path)]) == 0
    assert (tmp_path / "bank" / "provenance.json").exists()


def test_config_error_exit_code(cli_data, tmp_path):
    code = run(["train", "--manifest", str(cli_data / "data" / "manifest.json"),
                "--out-dir", str(tmp_path), *sets(["total_iters=10", "stage1_iters=10"])])
    assert code == 2
    assert run(["train", "--set", "no_such_key=1", "--out-dir", str(tmp_path)]) == 2
    assert run(["synthesize", "--set", "operators=[\"nope\"]", "--set",
                f"hdr_dir={cli_data / 'hdr'}", "--out-dir", str(tmp_path / "s")]) == 2


def test_data_error_exit_code(tmp_path):
    assert run(["eval", "--ckpt", str(tmp_path / "missing.ckpt"),
                "--manifest", str(tmp_path / "none.json"), "--out-dir", str(tmp_path)]) == 3


def test_unknown_flag_is_usage_error():
    with pytest.raises(SystemExit) as exc:
        run(["train", "--frobnicate"])
    assert exc.value.code == 2


def test_run_dir_env(monkeypatch, tmp_path, cli_data):
    monkeypatch.setenv("REALREP_RUN_DIR", str(tmp_path))
    assert run(["mine", "--manifest", str(cli_data / "data" / "manifest.json")]) == 0
    assert len(list(tmp_path.glob("mine-*"))) == 1


def test_console_entry_point():
    out = subprocess.run([sys.executable, "-m", "realrep.cli", "--help"], capture_output=True,
                         text=True)
    assert out.returncode == 0 and "export-embeddings" in out.stdout


def test_overfit_beats_naive_baseline(cli_data, tmp_path):
    # a short overfit on the training renditions must beat the no-op container conversion
    manifest = str(cli_data / "data" / "manifest.json")
    assert run(["train", "--manifest", manifest, "--out-dir", str(tmp_path), "--seed", "0",
                *sets(TINY + ["total_iters=150", "stage1_iters=100", "milestones=[1000]",
                              "lr=2e-3", "batch=4"])]) == 0
    from realrep.training import load_model
    from realrep.model import predict
    model = load_model(tmp_path / "last.ckpt", use_ema=False)
    m = DatasetManifest.load(manifest)
    entry = next(e for e in m.entries if e.split == "train")
    sdr = read_png(entry.sdr_paths["reinhard"])
    gt = ground_truth(entry)
    assert psnr(predict(model, sdr), gt) > psnr(naive_baseline(sdr), gt)
