"""SDR renditions of linear HDR sources.

Eight global tone-mapping operators stand in for the degradation styles of a
multi-style SDR corpus. Four follow published curves (Reinhard, BT.2446
method A, BT.2390 EETF, Hable filmic); the other four are parameterised
surrogates spanning luma-heavy and chroma-heavy distortions.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from . import color
from .color import EncodedImage, LinearImage, Primaries, SDR_ENCODING
from .imageio import read_linear, write_linear, write_png16

log = logging.getLogger(__name__)

SDR_WHITE = 100.0
HDR_PEAK = 1000.0


class ConfigurationError(ValueError):
    pass


class DatasetError(RuntimeError):
    pass


GAMUT_STRATEGIES = ("clip", "matrix_then_clip")

# id -> (default params, {param: (lo, hi)}, default gamut strategy)
OPERATOR_TABLE = {
    "reinhard": ({"exposure": 1.0}, {"exposure": (0.1, 10.0)}, "matrix_then_clip"),
    "bt2446a": ({"hdr_peak": 1000.0, "sdr_peak": 100.0},
                {"hdr_peak": (400.0, 10000.0), "sdr_peak": (50.0, 400.0)}, "matrix_then_clip"),
    "bt2390eetf": ({"source_peak": 1000.0, "target_peak": 100.0},
                   {"source_peak": (400.0, 10000.0), "target_peak": (50.0, 400.0)},
                   "matrix_then_clip"),
    "hable": ({"exposure": 2.0, "white": 11.2},
              {"exposure": (0.1, 16.0), "white": (1.0, 100.0)}, "matrix_then_clip"),
    "gamma_compress_a": ({"power": 0.6, "peak": 1000.0},
                         {"power": (0.2, 1.0), "peak": (100.0, 10000.0)}, "matrix_then_clip"),
    "gamma_compress_b": ({"power": 0.45, "peak": 1000.0},
                         {"power": (0.2, 1.0), "peak": (100.0, 10000.0)}, "clip"),
    "saturation_clip": ({"exposure": 1.0, "saturation": 1.35},
                        {"exposure": (0.1, 10.0), "saturation": (0.5, 2.5)}, "matrix_then_clip"),
    "mulaw": ({"mu": 255.0, "peak": 1000.0},
              {"mu": (1.0, 1e5), "peak": (100.0, 10000.0)}, "clip"),
}
OPERATOR_IDS = tuple(OPERATOR_TABLE)


@dataclass(frozen=True)
class DegradationOperator:
    id: str
    params: dict = field(default_factory=dict)
    gamut_strategy: str = "matrix_then_clip"

    def to_dict(self) -> dict:
        return {"id": self.id, "params": dict(self.params), "gamut_strategy": self.gamut_strategy}


def make_operator(op_id: str, gamut_strategy: str | None = None, **params) -> DegradationOperator:
    if op_id not in OPERATOR_TABLE:
        raise ConfigurationError(f"unknown degradation operator {op_id!r}; "
                                 f"known: {', '.join(OPERATOR_IDS)}")
    defaults, ranges, default_gamut = OPERATOR_TABLE[op_id]
    unknown = set(params) - set(defaults)
    if unknown:
        raise ConfigurationError(f"{op_id}: unknown parameters {sorted(unknown)}")
    merged = {**defaults, **{k: float(v) for k, v in params.items()}}
    for name, value in merged.items():
        lo, hi = ranges[name]
        if not lo <= value <= hi:
            raise ConfigurationError(f"{op_id}.{name}={value} outside [{lo}, {hi}]")
    gamut = gamut_strategy or default_gamut
    if gamut not in GAMUT_STRATEGIES:
        raise ConfigurationError(f"unknown gamut strategy {gamut!r}")
    return DegradationOperator(op_id, merged, gamut)


def _luminance(rgb):
    return rgb[..., 0] * color.KR + rgb[..., 1] * color.KG + rgb[..., 2] * color.KB


def _scale_by_luminance(rgb, curve):
    """Apply a luminance curve, keeping RGB ratios."""
    y = _luminance(rgb)
    out = curve(y)
    ratio = np.where(y > 0, out / np.where(y > 0, y, 1.0), 0.0)
    return rgb * ratio[..., None]


def _reinhard(rgb, p):
    return _scale_by_luminance(rgb * p["exposure"] / SDR_WHITE, lambda y: y / (1.0 + y))


def _hable_curve(x):
    a, b, c, d, e, f = 0.15, 0.50, 0.10, 0.20, 0.02, 0.30
    return (x * (a * x + c * b) + d * e) / (x * (a * x + b) + d * f) - e / f


def _hable(rgb, p):
    x = rgb * p["exposure"] / SDR_WHITE
    return _hable_curve(x) / _hable_curve(p["white"])


def _bt2446a(rgb, p):
    """BT.2446 method A luma compression with its chroma correction."""
    rho_hdr = 1.0 + 32.0 * (p["hdr_peak"] / 10000.0) ** (1.0 / 2.4)
    rho_sdr = 1.0 + 32.0 * (p["sdr_peak"] / 10000.0) ** (1.0 / 2.4)
    prime = np.clip(rgb / p["hdr_peak"], 0.0, 1.0) ** (1.0 / 2.4)
    y, cb, cr = color.rgb_to_ycbcr_planes(prime)
    yp = np.log1p((rho_hdr - 1.0) * y) / np.log(rho_hdr)
    yc = np.where(
        yp <= 0.7399, 1.0770 * yp,
        np.where(yp < 0.9909, -1.1510 * yp ** 2 + 2.7811 * yp - 0.6302, 0.5 * yp + 0.5))
    y_sdr = (rho_sdr ** yc - 1.0) / (rho_sdr - 1.0)
    f = np.where(y > 0, y_sdr / (1.1 * np.where(y > 0, y, 1.0)), 0.0)
    cb_t, cr_t = f * cb, f * cr
    y_t = y_sdr - np.maximum(0.1 * cr_t, 0.0)
    out = np.clip(color.ycbcr_planes_to_rgb(y_t, cb_t, cr_t), 0.0, 1.0)
    return out ** 2.4


def eetf_bt2390(nits, source_peak=1000.0, target_peak=100.0):
    """BT.2390 EETF (zero black levels) in the PQ domain; nits -> nits."""
    pq_src = color.pq_encode(source_peak)
    e1 = color.pq_encode(np.clip(nits, 0.0, source_peak)) / pq_src
    max_lum = color.pq_encode(target_peak) / pq_src
    ks = 1.5 * max_lum - 0.5
    t = (e1 - ks) / (1.0 - ks)
    spline = ((2 * t ** 3 - 3 * t ** 2 + 1) * ks + (t ** 3 - 2 * t ** 2 + t) * (1.0 - ks)
              + (-2 * t ** 3 + 3 * t ** 2) * max_lum)
    e2 = np.where(e1 < ks, e1, spline)
    return color.pq_decode(np.clip(e2 * pq_src, 0.0, 1.0))


def eetf_knee_nits(source_peak=1000.0, target_peak=100.0) -> float:
    pq_src = color.pq_encode(source_peak)
    ks = 1.5 * color.pq_encode(target_peak) / pq_src - 0.5
    return float(color.pq_decode(ks * pq_src))


def _bt2390eetf(rgb, p):
    return eetf_bt2390(rgb, p["source_peak"], p["target_peak"]) / SDR_WHITE


def _gamma_compress_a(rgb, p):
    return _scale_by_luminance(rgb, lambda y: np.clip(y / p["peak"], 0.0, 1.0) ** p["power"])


def _gamma_compress_b(rgb, p):
    return np.clip(rgb / p["peak"], 0.0, 1.0) ** p["power"]


def _saturation_clip(rgb, p):
    rel = rgb * p["exposure"] / SDR_WHITE
    y = _luminance(rel)[..., None]
    return y + p["saturation"] * (rel - y)


def _mulaw(rgb, p):
    mu = p["mu"]
    return _scale_by_luminance(
        rgb, lambda y: np.log1p(mu * np.clip(y / p["peak"], 0.0, 1.0)) / np.log1p(mu))


_CURVES = {
    "reinhard": _reinhard,
    "bt2446a": _bt2446a,
    "bt2390eetf": _bt2390eetf,
    "hable": _hable,
    "gamma_compress_a": _gamma_compress_a,
    "gamma_compress_b": _gamma_compress_b,
    "saturation_clip": _saturation_clip,
    "mulaw": _mulaw,
}


def apply_operator(hdr: LinearImage, op: DegradationOperator) -> EncodedImage:
    """Render a BT.2020 linear HDR image as gamma-2.2 BT.709 SDR."""
    if op.id not in _CURVES:
        raise ConfigurationError(f"unknown degradation operator {op.id!r}")
    if hdr.primaries is not Primaries.BT2020:
        raise ValueError("HDR sources must use BT.2020 primaries")
    rgb = hdr.pixels.astype(np.float64)
    if rgb.max(initial=0.0) > HDR_PEAK * (1 + 1e-6):
        raise ValueError(f"HDR source exceeds {HDR_PEAK} nits")
    if op.gamut_strategy == "matrix_then_clip":
        rgb = np.clip(color.gamut_convert(rgb, Primaries.BT2020, Primaries.BT709), 0.0, None)
    relative = _CURVES[op.id](rgb, op.params)
    sdr = color.gamma22_encode(np.clip(np.nan_to_num(relative), 0.0, 1.0))
    return EncodedImage(sdr.astype(np.float32), SDR_ENCODING)


def hdr_to_pq(hdr: LinearImage) -> EncodedImage:
    """Ground-truth HDR target: BT.2020 PQ code values."""
    return EncodedImage(color.pq_encode(hdr.pixels.astype(np.float64)).astype(np.float32),
                        color.HDR_ENCODING)


# --- procedural HDR sources -------------------------------------------------

PATTERNS = ("ramp", "color_sweep", "highlights", "noise_texture")


def _size(size):
    h, w = (size, size) if np.isscalar(size) else tuple(size)
    if h < 16 or w < 16:
        raise ValueError(f"synthetic images need at least 16x16 pixels, got {h}x{w}")
    return int(h), int(w)


def _hue_rgb(hue, sat):
    """Fully bright HSV colour for hue in [0, 1)."""
    k = np.stack([(5 + hue * 6) % 6, (3 + hue * 6) % 6, (1 + hue * 6) % 6], axis=-1)
    base = 1.0 - np.clip(np.minimum(k, 4 - k), 0.0, 1.0)
    return 1.0 - sat[..., None] * (1.0 - base)


def _smooth_noise(rng, h, w, sigma):
    field_ = gaussian_filter(rng.standard_normal((h, w)), sigma, mode="wrap")
    field_ -= field_.min()
    return field_ / max(field_.max(), 1e-12)


def make_synthetic_hdr(pattern: str, size=64, seed: int = 0) -> LinearImage:
    h, w = _size(size)
    rng = np.random.default_rng(seed)
    yy, xx = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
    if pattern == "ramp":
        v = xx if rng.random() < 0.5 else yy
        if rng.random() < 0.5:
            v = 1.0 - v
        tint = rng.uniform(0.5, 1.0, 3)
        tint /= tint.max()
        img = HDR_PEAK * v[..., None] ** rng.uniform(1.0, 3.0) * tint
    elif pattern == "color_sweep":
        hue = (xx + rng.random()) % 1.0
        sat = np.full_like(hue, rng.uniform(0.6, 1.0))
        img = HDR_PEAK * (yy ** rng.uniform(1.5, 3.0))[..., None] * _hue_rgb(hue, sat)
    elif pattern == "highlights":
        base = 1.0 + 79.0 * _smooth_noise(rng, h, w, max(h, w) / 8)
        tint = _hue_rgb(np.full((h, w), rng.random()), _smooth_noise(rng, h, w, 4) * 0.6)
        img = base[..., None] * tint
        mask = np.zeros((h, w), dtype=bool)
        while mask.mean() < 0.08:
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            r = rng.uniform(0.04, 0.12) * min(h, w)
            disk = (yy * (h - 1) - cy) ** 2 + (xx * (w - 1) - cx) ** 2 <= r * r
            level = rng.uniform(600.0, HDR_PEAK)
            blob_tint = _hue_rgb(np.array(rng.random()), np.array(rng.uniform(0.0, 0.3)))
            img[disk] = level * blob_tint
            mask |= disk
    elif pattern == "noise_texture":
        sigma = rng.uniform(2.0, 6.0) * min(h, w) / 64
        lum = 10.0 ** (3.0 * _smooth_noise(rng, h, w, sigma))
        hue = _smooth_noise(rng, h, w, sigma * 2)
        sat = 0.8 * _smooth_noise(rng, h, w, sigma * 2)
        img = lum[..., None] * _hue_rgb(hue, sat)
    else:
        raise ValueError(f"unknown pattern {pattern!r}; expected one of {PATTERNS}")
    img = np.clip(img, 0.0, HDR_PEAK).astype(np.float32)
    return LinearImage(img, Primaries.BT2020, HDR_PEAK)


def write_synthetic_sources(out_dir, count: int, size=64, seed: int = 0) -> list[Path]:
    """Write ``count`` procedural HDR scenes cycling through all patterns."""
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        pattern = PATTERNS[i % len(PATTERNS)]
        img = make_synthetic_hdr(pattern, size, seed=seed * 100003 + i)
        paths.append(write_linear(out_dir / f"scene_{i:04d}_{pattern}.raw", img))
    return paths


# --- dataset manifest -------------------------------------------------------

MANIFEST_VERSION = 1


@dataclass
class ManifestEntry:
    id: str
    hdr_path: Path
    sdr_paths: dict
    split: str = "train"


@dataclass
class DatasetManifest:
    entries: list
    seed: int = 0
    operators: list = field(default_factory=list)
    crop: int | None = None
    errors: list = field(default_factory=list)
    root: Path = Path(".")

    def operator_ids(self) -> list[str]:
        return [op["id"] for op in self.operators]

    def split(self, split: str) -> "DatasetManifest":
        return DatasetManifest([e for e in self.entries if e.split == split], self.seed,
                               self.operators, self.crop, self.errors, self.root)

    def restrict(self, operator_ids) -> "DatasetManifest":
        keep = list(operator_ids)
        entries = [ManifestEntry(e.id, e.hdr_path,
                                 {k: v for k, v in e.sdr_paths.items() if k in keep}, e.split)
                   for e in self.entries]
        ops = [op for op in self.operators if op["id"] in keep]
        return DatasetManifest([e for e in entries if e.sdr_paths], self.seed, ops,
                               self.crop, self.errors, self.root)

    def to_json(self) -> dict:
        def rel(p):
            return Path(p).relative_to(self.root).as_posix()
        return {
            "version": MANIFEST_VERSION,
            "seed": self.seed,
            "crop": self.crop,
            "sdr_encoding": SDR_ENCODING.to_dict(),
            "hdr_encoding": {"transfer": "linear", "primaries": "bt2020", "peak_nits": HDR_PEAK},
            "operators": self.operators,
            "entries": [{"id": e.id, "hdr_path": rel(e.hdr_path),
                         "sdr_paths": {k: rel(v) for k, v in e.sdr_paths.items()},
                         "split": e.split} for e in self.entries],
            "errors": self.errors,
        }

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path, check_paths: bool = True) -> "DatasetManifest":
        path = Path(path)
        data = json.loads(path.read_text())
        if data.get("version") != MANIFEST_VERSION:
            raise DatasetError(f"{path}: unsupported manifest version {data.get('version')}")
        root = path.parent
        entries = []
        for raw in data["entries"]:
            entry = ManifestEntry(raw["id"], root / raw["hdr_path"],
                                  {k: root / v for k, v in raw["sdr_paths"].items()},
                                  raw.get("split", "train"))
            if not entry.sdr_paths:
                raise DatasetError(f"{path}: entry {entry.id} has no SDR rendition")
            if check_paths:
                for p in [entry.hdr_path, *entry.sdr_paths.values()]:
                    if not p.exists():
                        raise DatasetError(f"{path}: missing file {p}")
            entries.append(entry)
        return cls(entries, int(data.get("seed", 0)), data.get("operators", []),
                   data.get("crop"), data.get("errors", []), root)


def _grid_crop(pixels, crop, rng):
    h, w = pixels.shape[:2]
    if crop is None or (crop >= h and crop >= w):
        return pixels
    if crop > h or crop > w:
        raise ValueError(f"crop {crop} larger than image {h}x{w}")
    gy, gx = h // crop, w // crop
    cy, cx = int(rng.integers(gy)), int(rng.integers(gx))
    return pixels[cy * crop:(cy + 1) * crop, cx * crop:(cx + 1) * crop]


def synthesize_dataset(hdr_dir, operators, out_dir, crop: int | None = None, seed: int = 0,
                       test_fraction: float = 0.25, workers: int = 1) -> DatasetManifest:
    """Render every HDR source in ``hdr_dir`` with every operator.

    Writes cropped HDR copies, 16-bit SDR PNGs and ``manifest.json`` under
    ``out_dir``. Unreadable sources are listed in ``manifest.errors``.
    """
    ops = [op if isinstance(op, DegradationOperator) else make_operator(op) for op in operators]
    if not ops:
        raise ConfigurationError("at least one degradation operator is required")
    if len({op.id for op in ops}) != len(ops):
        raise ConfigurationError("duplicate operator ids")
    hdr_dir, out_dir = Path(hdr_dir), Path(out_dir)
    sources = sorted(hdr_dir.glob("*.raw"))
    if not sources:
        raise DatasetError(f"no HDR sources (*.raw) in {hdr_dir}")
    out_dir.mkdir(parents=True, exist_ok=True)

    def render(indexed):
        i, src = indexed
        try:
            hdr = read_linear(src)
        except Exception as exc:  # recorded, run continues
            return src, None, f"{type(exc).__name__}: {exc}"
        rng = np.random.default_rng([seed, i])
        pixels = _grid_crop(hdr.pixels, crop, rng)
        hdr = LinearImage(np.ascontiguousarray(pixels), hdr.primaries, hdr.peak_nits)
        hdr_path = write_linear(out_dir / "hdr" / f"{src.stem}.raw", hdr)
        sdr_paths = {}
        for op in ops:
            sdr = apply_operator(hdr, op)
            sdr_paths[op.id] = write_png16(out_dir / "sdr" / op.id / f"{src.stem}.png",
                                           sdr.pixels)
        return src, (hdr_path, sdr_paths), None

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(render, enumerate(sources)))
    else:
        results = [render(item) for item in enumerate(sources)]

    entries, errors = [], []
    for src, rendered, err in results:
        if err is not None:
            log.warning("skipping %s: %s", src, err)
            errors.append({"path": src.name, "error": err})
            continue
        entries.append(ManifestEntry(src.stem, rendered[0], rendered[1]))
    if not entries:
        raise DatasetError(f"no decodable HDR sources in {hdr_dir}")

    order = np.random.default_rng(seed).permutation(len(entries))
    n_test = int(round(len(entries) * test_fraction))
    for rank, idx in enumerate(order):
        entries[idx].split = "test" if rank < n_test else "train"

    manifest = DatasetManifest(entries, seed, [op.to_dict() for op in ops], crop, errors,
                               out_dir)
    manifest.save(out_dir / "manifest.json")
    return manifest
