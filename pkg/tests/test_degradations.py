import json

import mpmath
import numpy as np
import pytest

from realrep import color
from realrep.color import LinearImage, Primaries
from realrep.degradations import (OPERATOR_IDS, PATTERNS, ConfigurationError, DatasetError,
                                  DatasetManifest, apply_operator, eetf_bt2390, eetf_knee_nits,
                                  hdr_to_pq, make_operator, make_synthetic_hdr,
                                  synthesize_dataset, write_synthetic_sources)
from realrep.imageio import read_linear, read_png, write_linear, write_png16

mpmath.mp.dps = 40


def gray(nits, shape=(4, 4)):
    return LinearImage(np.full((*shape, 3), nits, dtype=np.float64))


def test_reinhard_fixed_points():
    op = make_operator("reinhard")
    assert np.all(apply_operator(gray(0.0), op).pixels == 0.0)
    # 100 nits -> normalized L = 1 -> 0.5 linear, then gamma 2.2
    out = apply_operator(gray(100.0), op).pixels
    np.testing.assert_allclose(out, 0.5 ** (1 / 2.2), atol=1e-6)


def _pq(x):
    m1 = mpmath.mpf(2610) / 16384
    m2 = mpmath.mpf(2523) / 4096 * 128
    c1, c2, c3 = (mpmath.mpf(v) / 4096 * s for v, s in ((3424, 1), (2413, 32), (2392, 32)))
    y = (mpmath.mpf(x) / 10000) ** m1
    return ((c1 + c2 * y) / (1 + c3 * y)) ** m2


def _pq_inv(e):
    m1 = mpmath.mpf(2610) / 16384
    m2 = mpmath.mpf(2523) / 4096 * 128
    c1, c2, c3 = (mpmath.mpf(v) / 4096 * s for v, s in ((3424, 1), (2413, 32), (2392, 32)))
    p = mpmath.mpf(e) ** (1 / m2)
    return 10000 * (max(p - c1, 0) / (c2 - c3 * p)) ** (1 / m1)


def eetf_scalar(nits, lw=1000, lmax=100):
    """Piecewise EETF: linear below KS, Hermite spline above (zero black levels)."""
    e1 = _pq(nits) / _pq(lw)
    max_lum = _pq(lmax) / _pq(lw)
    ks = 1.5 * max_lum - 0.5
    if e1 < ks:
        e2 = e1
    else:
        t = (e1 - ks) / (1 - ks)
        e2 = ((2 * t**3 - 3 * t**2 + 1) * ks + (t**3 - 2 * t**2 + t) * (1 - ks)
              + (-2 * t**3 + 3 * t**2) * max_lum)
    return float(_pq_inv(e2 * _pq(lw)))


def test_eetf_knee():
    # frozen: KS = 1.5 * PQ(100)/PQ(1000) - 0.5 mapped back to nits
    knee = float(_pq_inv((1.5 * _pq(100) / _pq(1000) - 0.5) * _pq(1000)))
    assert eetf_knee_nits() == pytest.approx(knee, rel=1e-9)
    assert 27.0 < knee < 29.0


@pytest.mark.parametrize("nits", [0.5, 5.0, 20.0, 27.0])
def test_eetf_linear_segment(nits):
    assert eetf_bt2390(np.array(nits)) == pytest.approx(nits, rel=1e-9)
    assert eetf_scalar(nits) == pytest.approx(nits, rel=1e-12)


@pytest.mark.parametrize("nits", [40.0, 100.0, 400.0, 1000.0])
def test_eetf_matches_scalar_oracle(nits):
    assert eetf_bt2390(np.array(nits)) == pytest.approx(eetf_scalar(nits), rel=1e-9)
    assert eetf_bt2390(np.array(1000.0)) == pytest.approx(100.0, rel=1e-9)


@pytest.mark.parametrize("op_id", OPERATOR_IDS)
def test_operators_monotone_and_bounded(op_id):
    ramp = np.linspace(0, 1000, 257)
    img = LinearImage(np.repeat(ramp[None, :, None], 3, axis=2))
    out = apply_operator(img, make_operator(op_id)).pixels
    assert out.dtype == np.float32
    assert out.min() >= 0.0 and out.max() <= 1.0
    assert np.all(np.diff(out[0, :, 1]) >= -1e-7)


def test_operators_distinct():
    img = make_synthetic_hdr("color_sweep", 32, seed=1)
    outs = {op: apply_operator(img, make_operator(op)).pixels for op in OPERATOR_IDS}
    for a in OPERATOR_IDS:
        for b in OPERATOR_IDS:
            if a < b:
                assert np.abs(outs[a] - outs[b]).mean() > 1e-3, (a, b)


def test_operator_validation():
    with pytest.raises(ConfigurationError):
        make_operator("nope")
    with pytest.raises(ConfigurationError):
        make_operator("reinhard", exposure=100.0)
    with pytest.raises(ConfigurationError):
        make_operator("reinhard", gain=1.0)
    with pytest.raises(ConfigurationError):
        make_operator("reinhard", gamut_strategy="wrap")
    assert make_operator("hable", exposure=4).params["exposure"] == 4.0


def test_apply_operator_checks_input():
    with pytest.raises(ValueError):
        apply_operator(LinearImage(np.ones((2, 2, 3)), Primaries.BT709), make_operator("reinhard"))
    with pytest.raises(ValueError):
        apply_operator(gray(5000.0), make_operator("reinhard"))


def test_hdr_to_pq():
    out = hdr_to_pq(gray(100.0))
    assert out.encoding is color.HDR_ENCODING
    np.testing.assert_allclose(out.pixels, 0.5080784215173949, atol=1e-6)


def test_synthetic_patterns():
    ramp = make_synthetic_hdr("ramp", 64, seed=0)
    assert ramp.pixels.max() == pytest.approx(1000.0, rel=1e-6)
    assert ramp.pixels.min() == 0.0
    hl = make_synthetic_hdr("highlights", 64, seed=0)
    assert (hl.pixels.max(axis=2) > 500).mean() >= 0.05
    for p in PATTERNS:
        a, b = make_synthetic_hdr(p, 32, seed=5), make_synthetic_hdr(p, 32, seed=5)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert a.pixels.max() <= 1000.0
    with pytest.raises(ValueError):
        make_synthetic_hdr("ramp", 8)
    with pytest.raises(ValueError):
        make_synthetic_hdr("plaid", 32)


def test_linear_io_roundtrip(tmp_path):
    img = make_synthetic_hdr("noise_texture", (20, 24), seed=2)
    path = write_linear(tmp_path / "x.raw", img)
    back = read_linear(path)
    np.testing.assert_array_equal(back.pixels, img.pixels)
    assert json.loads((tmp_path / "x.json").read_text())["width"] == 24


def test_png16_roundtrip(tmp_path):
    px = np.random.default_rng(0).random((9, 7, 3))
    back = read_png(write_png16(tmp_path / "a.png", px))
    assert back.shape == (9, 7, 3)
    np.testing.assert_allclose(back, px, atol=0.5 / 65535 + 1e-7)


def _write_sources(root, n=4):
    return write_synthetic_sources(root, n, 32, seed=1)


def test_synthesize_counting(tmp_path):
    _write_sources(tmp_path / "src")
    m = synthesize_dataset(tmp_path / "src", ["reinhard", "hable"], tmp_path / "out", seed=0)
    assert len(m.entries) == 4
    assert all(len(e.sdr_paths) == 2 for e in m.entries)
    assert len(list((tmp_path / "out" / "sdr").rglob("*.png"))) == 8
    assert sum(e.split == "test" for e in m.entries) == 1
    loaded = DatasetManifest.load(tmp_path / "out" / "manifest.json")
    assert [e.id for e in loaded.entries] == [e.id for e in m.entries]
    assert loaded.operator_ids() == ["reinhard", "hable"]


def test_synthesize_deterministic(tmp_path):
    _write_sources(tmp_path / "src")
    runs = []
    for name in ("a", "b"):
        synthesize_dataset(tmp_path / "src", ["bt2446a", "mulaw"], tmp_path / name, crop=16,
                           seed=9)
        runs.append(tmp_path / name)
    assert (runs[0] / "manifest.json").read_text() == (runs[1] / "manifest.json").read_text()
    for f in sorted((runs[0]).rglob("*.png")) + sorted(runs[0].rglob("*.raw")):
        assert f.read_bytes() == (runs[1] / f.relative_to(runs[0])).read_bytes()


def test_synthesize_errors(tmp_path):
    _write_sources(tmp_path / "src", 2)
    with pytest.raises(ConfigurationError):
        synthesize_dataset(tmp_path / "src", [], tmp_path / "out")
    with pytest.raises(DatasetError):
        synthesize_dataset(tmp_path / "empty", ["reinhard"], tmp_path / "out")
    (tmp_path / "src" / "broken.raw").write_bytes(b"\x00" * 7)
    (tmp_path / "src" / "broken.json").write_text('{"width": 4, "height": 4, "channels": 3, '
                                                  '"primaries": "bt2020", "peak_nits": 1000}')
    m = synthesize_dataset(tmp_path / "src", ["reinhard"], tmp_path / "out2")
    assert len(m.entries) == 2 and m.errors[0]["path"] == "broken.raw"


def test_manifest_restrict_and_missing(tmp_path):
    _write_sources(tmp_path / "src", 2)
    m = synthesize_dataset(tmp_path / "src", ["reinhard", "hable"], tmp_path / "out")
    r = m.restrict(["hable"])
    assert r.operator_ids() == ["hable"] and all(list(e.sdr_paths) == ["hable"] for e in r.entries)
    next((tmp_path / "out" / "sdr" / "hable").glob("*.png")).unlink()
    with pytest.raises(DatasetError):
        DatasetManifest.load(tmp_path / "out" / "manifest.json")
