"""Transfer functions, primaries conversion, YCbCr and ITP.

Everything here is a pure function over numpy arrays. Dtype follows the
input (float64 for reference checks, float32 in the data pipeline).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Transfer(str, Enum):
    LINEAR = "linear"
    GAMMA22 = "gamma22"
    PQ = "pq"


class Primaries(str, Enum):
    BT709 = "bt709"
    BT2020 = "bt2020"


class ColorDomainError(ValueError):
    """Input outside the domain of a transfer function."""


@dataclass(frozen=True)
class ColorEncoding:
    transfer: Transfer
    primaries: Primaries
    peak_nits: float

    def __post_init__(self):
        object.__setattr__(self, "transfer", Transfer(self.transfer))
        object.__setattr__(self, "primaries", Primaries(self.primaries))
        if not self.peak_nits > 0:
            raise ValueError(f"peak_nits must be positive, got {self.peak_nits}")
        if self.transfer is Transfer.PQ and self.primaries is not Primaries.BT2020:
            raise ValueError("PQ encoding is only used with BT.2020 primaries")
        if self.transfer is Transfer.GAMMA22 and self.primaries is not Primaries.BT709:
            raise ValueError("gamma 2.2 encoding is only used with BT.709 primaries")

    def to_dict(self) -> dict:
        return {"transfer": self.transfer.value, "primaries": self.primaries.value,
                "peak_nits": self.peak_nits}


SDR_ENCODING = ColorEncoding(Transfer.GAMMA22, Primaries.BT709, 100.0)
HDR_ENCODING = ColorEncoding(Transfer.PQ, Primaries.BT2020, 1000.0)


@dataclass
class LinearImage:
    """Scene-linear RGB in absolute nits, H x W x 3."""

    pixels: np.ndarray
    primaries: Primaries = Primaries.BT2020
    peak_nits: float = 1000.0

    def __post_init__(self):
        self.primaries = Primaries(self.primaries)
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError("linear image contains non-finite values")
        if np.any(self.pixels < 0):
            raise ValueError("linear image contains negative values")


@dataclass
class EncodedImage:
    """Nonlinearly encoded RGB in [0, 1], H x W x 3."""

    pixels: np.ndarray
    encoding: ColorEncoding = field(default=SDR_ENCODING)

    def __post_init__(self):
        if self.pixels.ndim != 3 or self.pixels.shape[2] != 3:
            raise ValueError(f"expected H x W x 3 pixels, got {self.pixels.shape}")
        self.pixels = np.clip(self.pixels, 0.0, 1.0)


@dataclass
class YCbCrImage:
    y: np.ndarray
    cb: np.ndarray
    cr: np.ndarray

    def __post_init__(self):
        if not (self.y.shape == self.cb.shape == self.cr.shape):
            raise ValueError("y, cb, cr planes must share a shape")


# SMPTE ST 2084
PQ_M1 = 2610.0 / 16384.0
PQ_M2 = 2523.0 / 4096.0 * 128.0
PQ_C1 = 3424.0 / 4096.0
PQ_C2 = 2413.0 / 4096.0 * 32.0
PQ_C3 = 2392.0 / 4096.0 * 32.0
PQ_PEAK = 10000.0

GAMMA = 2.2

# BT.709 luma weights, used for every SDR-domain decomposition
KR, KG, KB = 0.2126, 0.7152, 0.0722


def _asarray(x):
    a = np.asarray(x)
    if not np.issubdtype(a.dtype, np.floating):
        a = a.astype(np.float64)
    return a


def pq_encode(nits):
    """Absolute luminance in nits -> PQ code value in [0, 1]."""
    v = _asarray(nits)
    if np.any(v < 0) or np.any(v > PQ_PEAK) or not np.all(np.isfinite(v)):
        raise ColorDomainError("PQ input must lie in [0, 10000] nits")
    y = (v / PQ_PEAK) ** PQ_M1
    return ((PQ_C1 + PQ_C2 * y) / (1.0 + PQ_C3 * y)) ** PQ_M2


def pq_decode(code):
    """PQ code value in [0, 1] -> absolute luminance in nits."""
    e = _asarray(code)
    if np.any(e < 0) or np.any(e > 1) or not np.all(np.isfinite(e)):
        raise ColorDomainError("PQ code values must lie in [0, 1]")
    p = e ** (1.0 / PQ_M2)
    y = np.maximum(p - PQ_C1, 0.0) / (PQ_C2 - PQ_C3 * p)
    return PQ_PEAK * y ** (1.0 / PQ_M1)


def gamma22_encode(relative):
    v = _asarray(relative)
    if np.any(v < 0) or np.any(v > 1) or not np.all(np.isfinite(v)):
        raise ColorDomainError("gamma 2.2 input must lie in [0, 1]")
    return v ** (1.0 / GAMMA)


def gamma22_decode(code):
    e = _asarray(code)
    if np.any(e < 0) or np.any(e > 1) or not np.all(np.isfinite(e)):
        raise ColorDomainError("gamma 2.2 code values must lie in [0, 1]")
    return e ** GAMMA


# CIE 1931 xy chromaticities
_PRIMARIES_XY = {
    Primaries.BT709: ((0.640, 0.330), (0.300, 0.600), (0.150, 0.060)),
    Primaries.BT2020: ((0.708, 0.292), (0.170, 0.797), (0.131, 0.046)),
}
_D65 = (0.3127, 0.3290)


def _xyz(xy):
    x, y = xy
    return np.array([x / y, 1.0, (1.0 - x - y) / y])


def rgb_to_xyz_matrix(primaries) -> np.ndarray:
    """Normalized primary matrix (RGB -> XYZ, white Y = 1)."""
    prim = np.stack([_xyz(c) for c in _PRIMARIES_XY[Primaries(primaries)]], axis=1)
    scale = np.linalg.solve(prim, _xyz(_D65))
    return prim * scale


def gamut_matrix(src, dst) -> np.ndarray:
    src, dst = Primaries(src), Primaries(dst)
    if src is dst:
        return np.eye(3)
    return np.linalg.solve(rgb_to_xyz_matrix(dst), rgb_to_xyz_matrix(src))


BT709_TO_BT2020 = gamut_matrix(Primaries.BT709, Primaries.BT2020)
BT2020_TO_BT709 = gamut_matrix(Primaries.BT2020, Primaries.BT709)


def gamut_convert(rgb, src, dst):
    """Convert linear RGB (..., 3) between primaries sets."""
    a = _asarray(rgb)
    if a.shape[-1] != 3:
        raise ValueError(f"last axis must hold 3 channels, got shape {a.shape}")
    m = gamut_matrix(src, dst).astype(a.dtype)
    return a @ m.T


def rgb_to_ycbcr_planes(rgb):
    """Full-range BT.709 R'G'B' (..., 3) -> (y, cb, cr) with zero-centred chroma.

    Luma is formed as G + Kr(R - G) + Kb(B - G), so R = G = B gives Y = G
    exactly and the chroma planes come out as exact zeros.
    """
    a = _asarray(rgb)
    r, g, b = a[..., 0], a[..., 1], a[..., 2]
    y = g + KR * (r - g) + KB * (b - g)
    cb = (b - y) / (2.0 * (1.0 - KB))
    cr = (r - y) / (2.0 * (1.0 - KR))
    return y, cb, cr


def ycbcr_planes_to_rgb(y, cb, cr):
    y, cb, cr = _asarray(y), _asarray(cb), _asarray(cr)
    r = y + 2.0 * (1.0 - KR) * cr
    b = y + 2.0 * (1.0 - KB) * cb
    g = (y - KR * r - KB * b) / KG
    return np.stack([r, g, b], axis=-1)


def rgb_to_ycbcr(img: EncodedImage) -> YCbCrImage:
    return YCbCrImage(*rgb_to_ycbcr_planes(img.pixels))


def ycbcr_to_rgb(ycc: YCbCrImage, encoding: ColorEncoding = SDR_ENCODING,
                 clamp: bool = True) -> EncodedImage:
    rgb = ycbcr_planes_to_rgb(ycc.y, ycc.cb, ycc.cr)
    if clamp:
        rgb = np.clip(rgb, 0.0, 1.0)
    return EncodedImage(rgb, encoding)


# BT.2100 ICtCp, with the BT.2124 T = 0.5 * Ct scaling
_RGB2020_TO_LMS = np.array([
    [1688.0, 2146.0, 262.0],
    [683.0, 2951.0, 462.0],
    [99.0, 309.0, 3688.0],
]) / 4096.0
_LMS_TO_ICTCP = np.array([
    [2048.0, 2048.0, 0.0],
    [6610.0, -13613.0, 7003.0],
    [17933.0, -17390.0, -543.0],
]) / 4096.0


def rgb_to_itp(rgb_nits):
    """Linear BT.2020 RGB in nits (..., 3) -> ITP (..., 3)."""
    a = _asarray(rgb_nits)
    if np.any(a < 0):
        raise ColorDomainError("ITP conversion needs nonnegative linear input")
    lms = a @ _RGB2020_TO_LMS.T.astype(a.dtype)
    ictcp = pq_encode(np.minimum(lms, PQ_PEAK)) @ _LMS_TO_ICTCP.T.astype(a.dtype)
    return ictcp * np.array([1.0, 0.5, 1.0], dtype=a.dtype)


def delta_e_itp_pixels(rgb_a, rgb_b):
    """Per-pixel BT.2124 colour difference between linear BT.2020 nits arrays."""
    d = rgb_to_itp(rgb_a) - rgb_to_itp(rgb_b)
    return 720.0 * np.sqrt(np.sum(d * d, axis=-1))


def sdr_to_naive_hdr(sdr: np.ndarray, sdr_peak: float = 100.0) -> np.ndarray:
    """Place gamma-2.2 BT.709 SDR into a PQ BT.2020 container without expansion."""
    lin = gamma22_decode(np.clip(sdr, 0.0, 1.0)) * sdr_peak
    return pq_encode(np.clip(gamut_convert(lin, Primaries.BT709, Primaries.BT2020), 0.0, None))
