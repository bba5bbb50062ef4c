import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import delta_e_scalar, pq_oracle
from realrep import color
from realrep.color import (ColorDomainError, ColorEncoding, EncodedImage, LinearImage,
                           Primaries, Transfer)

# frozen from pq_oracle at 40 digits
PQ_100 = 0.5080784215173949
PQ_1000 = 0.7518270962470418
GAMMA_HALF = 0.7297400528407231


def test_pq_frozen_values():
    assert pq_oracle(100) == pytest.approx(PQ_100, abs=1e-15)
    assert color.pq_encode(100.0) == pytest.approx(PQ_100, abs=1e-12)
    assert color.pq_encode(1000.0) == pytest.approx(PQ_1000, abs=1e-12)
    assert color.pq_encode(10000.0) == pytest.approx(1.0, abs=1e-12)
    # c1^m2, a hair above zero by construction of the curve
    assert color.pq_encode(0.0) == pytest.approx(0.0, abs=1e-6)


@pytest.mark.parametrize("nits", [0.005, 0.1, 1, 48, 203, 600, 4000, 9999])
def test_pq_matches_high_precision(nits):
    assert color.pq_encode(nits) == pytest.approx(pq_oracle(nits), abs=1e-12)


def test_pq_decode_endpoints():
    assert color.pq_decode(0.0) == 0.0
    assert color.pq_decode(1.0) == pytest.approx(10000.0, rel=1e-12)


@pytest.mark.parametrize("bad", [-1.0, 10000.5, np.nan])
def test_pq_encode_domain(bad):
    with pytest.raises(ColorDomainError):
        color.pq_encode(bad)


def test_pq_decode_domain():
    with pytest.raises(ColorDomainError):
        color.pq_decode(1.01)


def test_gamma22():
    assert color.gamma22_encode(0.0) == 0.0
    assert color.gamma22_encode(1.0) == 1.0
    assert color.gamma22_encode(0.5) == pytest.approx(GAMMA_HALF, abs=1e-15)
    assert float(mpmath.mpf(0.5) ** (1 / mpmath.mpf(2.2))) == pytest.approx(GAMMA_HALF, abs=1e-15)
    with pytest.raises(ColorDomainError):
        color.gamma22_encode(1.5)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 10000.0))
def test_pq_roundtrip_property(nits):
    assert color.pq_decode(color.pq_encode(nits)) == pytest.approx(nits, abs=1e-6 * max(1, nits))


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_pq_monotone(a, b):
    lo, hi = sorted((a * 10000, b * 10000))
    assert color.pq_encode(lo) <= color.pq_encode(hi)


def test_gamut_white_and_black():
    for src, dst in [(Primaries.BT709, Primaries.BT2020), (Primaries.BT2020, Primaries.BT709)]:
        np.testing.assert_allclose(color.gamut_convert([1.0, 1.0, 1.0], src, dst), 1.0,
                                   atol=1e-12)
        np.testing.assert_array_equal(color.gamut_convert([0.0, 0.0, 0.0], src, dst), 0.0)


def test_gamut_matrix_known_values():
    # first row of the published BT.709 -> BT.2020 matrix (BT.2087)
    np.testing.assert_allclose(color.BT709_TO_BT2020[0], [0.6274, 0.3293, 0.0433], atol=1e-4)
    np.testing.assert_allclose(color.BT709_TO_BT2020 @ color.BT2020_TO_BT709, np.eye(3),
                               atol=1e-12)


def test_red_round_trip():
    red2020 = color.gamut_convert([1.0, 0.0, 0.0], Primaries.BT709, Primaries.BT2020)
    back = color.gamut_convert(red2020, Primaries.BT2020, Primaries.BT709)
    np.testing.assert_allclose(back, [1.0, 0.0, 0.0], atol=1e-6)


def test_ycbcr_fixed_points():
    y, cb, cr = color.rgb_to_ycbcr_planes(np.full((4, 4, 3), 0.5))
    assert np.all(y == 0.5) and np.all(cb == 0.0) and np.all(cr == 0.0)
    y, cb, cr = color.rgb_to_ycbcr_planes(np.ones(3))
    assert y == 1.0 and cb == 0.0 and cr == 0.0


def test_ycbcr_red():
    y, cb, cr = color.rgb_to_ycbcr_planes(np.array([1.0, 0.0, 0.0]))
    assert y == pytest.approx(0.2126, abs=1e-15)
    # -0.2126 / 1.8556, evaluated independently
    assert cb == pytest.approx(-0.11457210605733994, abs=1e-15)
    assert cr == pytest.approx(0.5, abs=1e-15)


def test_ycbcr_roundtrip():
    rgb = np.random.default_rng(1).random((10000, 3))
    back = color.ycbcr_planes_to_rgb(*color.rgb_to_ycbcr_planes(rgb))
    np.testing.assert_allclose(back, rgb, atol=1e-12)


def test_ycbcr_image_wrappers():
    img = EncodedImage(np.random.default_rng(2).random((5, 6, 3)))
    ycc = color.rgb_to_ycbcr(img)
    assert ycc.y.shape == (5, 6)
    np.testing.assert_allclose(color.ycbcr_to_rgb(ycc).pixels, img.pixels, atol=1e-12)


def test_delta_e_frozen():
    # frozen from delta_e_scalar with 40-digit PQ
    assert delta_e_scalar((100, 100, 100), (200, 200, 200)) == pytest.approx(
        51.159473082813303, abs=1e-9)
    got = color.delta_e_itp_pixels(np.array([100.0] * 3), np.array([200.0] * 3))
    assert got == pytest.approx(51.159473082813303, abs=1e-4)
    got = color.delta_e_itp_pixels(np.array([120.0, 40.0, 10.0]), np.array([90.0, 60.0, 30.0]))
    assert got == pytest.approx(73.891367459936204, abs=1e-4)


def test_delta_e_fixed_points():
    px = np.random.default_rng(3).random((8, 8, 3)) * 1000
    assert np.all(color.delta_e_itp_pixels(px, px) == 0.0)
    assert color.rgb_to_itp(np.zeros(3))[0] == pytest.approx(0.0, abs=1e-6)
    with pytest.raises(ColorDomainError):
        color.rgb_to_itp(np.array([-1.0, 0.0, 0.0]))


def test_encoding_invariants():
    with pytest.raises(ValueError):
        ColorEncoding(Transfer.PQ, Primaries.BT709, 1000.0)
    with pytest.raises(ValueError):
        ColorEncoding(Transfer.GAMMA22, Primaries.BT709, 0.0)
    assert color.HDR_ENCODING.to_dict() == {"transfer": "pq", "primaries": "bt2020",
                                            "peak_nits": 1000.0}


def test_image_containers():
    with pytest.raises(ValueError):
        LinearImage(np.full((2, 2, 3), -1.0))
    with pytest.raises(ValueError):
        LinearImage(np.full((2, 2, 3), np.inf))
    img = EncodedImage(np.full((2, 2, 3), 1.5))
    assert img.pixels.max() == 1.0


def test_naive_hdr_white():
    # SDR white lands at 100 nits in the PQ container
    out = color.sdr_to_naive_hdr(np.ones((2, 2, 3)))
    np.testing.assert_allclose(out, PQ_100, atol=1e-9)
