"""PSNR / SSIM / Delta E ITP, evaluation reports and embedding export."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from numpy.lib.stride_tricks import sliding_window_view

from . import color
from .color import EncodedImage, Transfer
from .degradations import DatasetManifest, hdr_to_pq
from .imageio import read_linear, read_png
from .model import RealRep, pad_to_multiple, predict

log = logging.getLogger(__name__)

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def _pixels(img):
    return np.asarray(img.pixels if isinstance(img, EncodedImage) else img, dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def psnr(pred, gt, peak: float = 1.0) -> float:
    a, b = _pixels(pred), _pixels(gt)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(peak * peak / mse)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    ax = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _ssim_plane(a, b, window, c1, c2):
    wa = sliding_window_view(a, window.shape)
    wb = sliding_window_view(b, window.shape)

    def filt(x):
        return np.einsum("ijkl,kl->ij", x, window)

    mu_a, mu_b = filt(wa), filt(wb)
    var_a = filt(wa * wa) - mu_a * mu_a
    var_b = filt(wb * wb) - mu_b * mu_b
    cov = filt(wa * wb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Single-scale SSIM, 11x11 Gaussian window (sigma 1.5), valid region, channel mean."""
    a, b = _pixels(pred), _pixels(gt)
    _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got "
                         f"{a.shape[0]}x{a.shape[1]}")
    window = gaussian_window()
    c1, c2 = (SSIM_K1 * data_range) ** 2, (SSIM_K2 * data_range) ** 2
    return float(np.mean([_ssim_plane(a[..., c], b[..., c], window, c1, c2)
                          for c in range(a.shape[2])]))


def delta_e_itp(pred, gt) -> float:
    """Mean BT.2124 Delta E ITP between two PQ-encoded BT.2020 images."""
    for img in (pred, gt):
        if isinstance(img, EncodedImage) and img.encoding.transfer is not Transfer.PQ:
            raise ValueError("Delta E ITP is defined here for PQ-encoded inputs only")
    a, b = _pixels(pred), _pixels(gt)
    _check_shapes(a, b)
    return float(np.mean(color.delta_e_itp_pixels(color.pq_decode(a), color.pq_decode(b))))


# --- reports ----------------------------------------------------------------

METRICS = ("psnr_db", "ssim", "delta_e_itp")


@dataclass
class MetricReport:
    rows: list = field(default_factory=list)
    per_degradation: dict = field(default_factory=dict)
    average: dict = field(default_factory=dict)
    split: str = "test"

    @staticmethod
    def aggregate(rows) -> dict:
        return {m: float(np.mean([r[m] for r in rows])) for m in METRICS} if rows else {}

    def finalize(self) -> "MetricReport":
        ops = sorted({r["degradation"] for r in self.rows})
        self.per_degradation = {
            op: {**self.aggregate([r for r in self.rows if r["degradation"] == op]),
                 "tag": next(r["tag"] for r in self.rows if r["degradation"] == op)}
            for op in ops}
        self.average = self.aggregate(self.rows)
        for tag in ("known", "unknown"):
            sub = [r for r in self.rows if r["tag"] == tag]
            if sub:
                self.average[tag] = self.aggregate(sub)
        return self

    def to_json(self) -> dict:
        return {"split": self.split, "average": self.average,
                "per_degradation": self.per_degradation, "rows": self.rows}

    def write(self, out_dir, stem: str = "report") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        jpath = out_dir / f"{stem}.json"
        jpath.write_text(json.dumps(self.to_json(), indent=2) + "\n")
        cpath = out_dir / f"{stem}.csv"
        with open(cpath, "w", newline="") as fh:
            w = csv.DictWriter(fh, ["image", "degradation", "tag", *METRICS])
            w.writeheader()
            w.writerows(self.rows)
            for op, agg in self.per_degradation.items():
                w.writerow({"image": "MEAN", "degradation": op, "tag": agg["tag"],
                            **{m: agg[m] for m in METRICS}})
            w.writerow({"image": "MEAN", "degradation": "ALL", "tag": "",
                        **{m: self.average[m] for m in METRICS}})
        return jpath, cpath


def ground_truth(entry) -> np.ndarray:
    return hdr_to_pq(read_linear(entry.hdr_path)).pixels.astype(np.float64)


def evaluate(model, manifest: DatasetManifest, split: str = "test", operators=None,
             known_operators=None, predictor=None) -> MetricReport:
    """Score ``model`` on every (entry, operator) of ``split``.

    ``predictor(sdr) -> pq`` overrides the model (used for baselines). Operators
    listed in ``known_operators`` are tagged ``known``, others ``unknown``.
    """
    if predictor is None:
        def predictor(sdr):
            return predict(model, sdr)
    known = set(known_operators if known_operators is not None
                else getattr(model, "train_operators", None) or [])
    report = MetricReport(split=split)
    entries = manifest.entries if split in ("all", None) else [
        e for e in manifest.entries if e.split == split]
    for entry in entries:
        try:
            gt = ground_truth(entry)
        except (OSError, ValueError) as exc:
            log.warning("skipping %s: no ground truth (%s)", entry.id, exc)
            continue
        for op, path in sorted(entry.sdr_paths.items()):
            if operators is not None and op not in operators:
                continue
            pred = predictor(read_png(path))
            report.rows.append({
                "image": entry.id, "degradation": op,
                "tag": "known" if (not known or op in known) else "unknown",
                "psnr_db": psnr(pred, gt), "ssim": ssim(pred, gt),
                "delta_e_itp": delta_e_itp(pred, gt)})
    return report.finalize()


# --- embeddings -------------------------------------------------------------

@dataclass
class EmbeddingDump:
    ids: list
    labels: list
    vectors: np.ndarray
    coords: np.ndarray | None = None

    def write_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        dims = self.vectors.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "label", *[f"d{i}" for i in range(dims)], "tsne_x", "tsne_y"])
            for i, (eid, label) in enumerate(zip(self.ids, self.labels)):
                xy = self.coords[i] if self.coords is not None else ("", "")
                w.writerow([eid, label, *[f"{v:.8g}" for v in self.vectors[i]],
                            *[f"{v:.8g}" if v != "" else "" for v in xy]])
        return path


@torch.no_grad()
def global_priors(model: RealRep, images: list) -> np.ndarray:
    model.eval()
    param = next(model.parameters())
    out = []
    for sdr in images:
        x = torch.from_numpy(np.ascontiguousarray(sdr.transpose(2, 0, 1)))[None]
        x, _ = pad_to_multiple(x.to(param.dtype), model.multiple)
        out.append(model.priors(x)[1].z_deg_g[0].double().numpy())
    return np.stack(out)


def collect_embeddings(model, manifest: DatasetManifest, split: str = "all",
                       operators=None) -> EmbeddingDump:
    ids, labels, images = [], [], []
    for entry in manifest.entries:
        if split not in ("all", None) and entry.split != split:
            continue
        for op, path in sorted(entry.sdr_paths.items()):
            if operators is not None and op not in operators:
                continue
            ids.append(f"{entry.id}:{op}")
            labels.append(op)
            images.append(read_png(path))
    return EmbeddingDump(ids, labels, global_priors(model, images))


def reduce_embeddings(vectors: np.ndarray, n_pca: int = 16, perplexity: float = 50.0,
                      seed: int = 0) -> np.ndarray:
    """PCA to ``n_pca`` components, then 2-D t-SNE."""
    from sklearn.decomposition import PCA
    from sklearn.manifold import TSNE

    n = vectors.shape[0]
    if n < 3:
        raise ValueError("need at least 3 embeddings for t-SNE")
    k = min(n_pca, n, vectors.shape[1])
    reduced = PCA(n_components=k, random_state=seed).fit_transform(vectors)
    if perplexity >= n:
        new = max(1.0, (n - 1) / 3.0)
        log.warning("perplexity %.1f too large for %d points; using %.1f", perplexity, n, new)
        perplexity = new
    tsne = TSNE(n_components=2, perplexity=perplexity, init="pca", random_state=seed)
    return tsne.fit_transform(reduced)


def export_embeddings(model, manifest: DatasetManifest, out_csv=None, split: str = "all",
                      operators=None, n_pca: int = 16, perplexity: float = 50.0,
                      seed: int = 0) -> EmbeddingDump:
    dump = collect_embeddings(model, manifest, split, operators)
    dump.coords = reduce_embeddings(dump.vectors, n_pca, perplexity, seed)
    if out_csv is not None:
        dump.write_csv(out_csv)
    return dump


def linear_probe(train_x, train_y, test_x, test_y, seed: int = 0) -> float:
    """Held-out accuracy of a multinomial logistic regression on frozen features."""
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler

    clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000, random_state=seed))
    clf.fit(np.asarray(train_x), np.asarray(train_y))
    return float(np.mean(clf.predict(np.asarray(test_x)) == np.asarray(test_y)))


def probe_accuracy(model, manifest: DatasetManifest, operators, seed: int = 0) -> float:
    """Fit on train-split renditions, score on test-split renditions."""
    tr = collect_embeddings(model, manifest, "train", operators)
    te = collect_embeddings(model, manifest, "test", operators)
    return linear_probe(tr.vectors, tr.labels, te.vectors, te.labels, seed)
