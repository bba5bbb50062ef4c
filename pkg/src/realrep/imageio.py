"""On-disk formats.

Linear HDR: planar little-endian float32 ``.raw`` with a JSON sidecar
``{width, height, channels, primaries, peak_nits}``. Encoded images:
16-bit RGB PNG (no HDR tags; encoding metadata lives in the manifest).
"""

from __future__ import annotations

import json
from pathlib import Path

import cv2
import numpy as np

from .color import LinearImage

PNG_MAX = 65535


def sidecar_path(raw_path) -> Path:
    return Path(raw_path).with_suffix(".json")


def write_linear(path, img: LinearImage) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    h, w, c = img.pixels.shape
    planar = np.ascontiguousarray(img.pixels.transpose(2, 0, 1), dtype="<f4")
    path.write_bytes(planar.tobytes())
    meta = {"width": w, "height": h, "channels": c,
            "primaries": img.primaries.value, "peak_nits": float(img.peak_nits)}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path


def read_linear(path) -> LinearImage:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    w, h, c = int(meta["width"]), int(meta["height"]), int(meta["channels"])
    data = np.frombuffer(path.read_bytes(), dtype="<f4")
    if data.size != w * h * c:
        raise ValueError(f"{path}: expected {w * h * c} floats, found {data.size}")
    pixels = data.reshape(c, h, w).transpose(1, 2, 0).astype(np.float32)
    return LinearImage(pixels, meta["primaries"], float(meta["peak_nits"]))


def quantize16(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * PNG_MAX).astype(np.uint16)


def write_png16(path, pixels: np.ndarray) -> Path:
    """Write an H x W x 3 array in [0, 1] as a 16-bit RGB PNG."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    bgr = quantize16(pixels)[..., ::-1]
    ok, buf = cv2.imencode(".png", np.ascontiguousarray(bgr))
    if not ok:
        raise OSError(f"PNG encoding failed for {path}")
    path.write_bytes(buf.tobytes())
    return path


def read_png(path) -> np.ndarray:
    """Read an 8- or 16-bit RGB PNG into float32 [0, 1], H x W x 3."""
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    bgr = cv2.imdecode(raw, cv2.IMREAD_UNCHANGED)
    if bgr is None:
        raise ValueError(f"cannot decode image {path}")
    if bgr.ndim == 2:
        bgr = np.repeat(bgr[..., None], 3, axis=2)
    bgr = bgr[..., :3]
    scale = PNG_MAX if bgr.dtype == np.uint16 else 255
    return (bgr[..., ::-1].astype(np.float32) / scale)
