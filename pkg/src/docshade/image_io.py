"""Raster file I/O.

Quantitative data travels as PFM (raw float32, no transform). PNG is for
8-bit previews and for ingesting photographs; sRGB decode/encode happens
here and only here.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DataIoError
from .imaging import LinearImage, ShadingMap, WBKernel


def srgb_decode(arr: np.ndarray) -> np.ndarray:
    """Nonlinear sRGB in [0,1] -> linear intensities."""
    a = np.asarray(arr, dtype=np.float32)
    low = a / 12.92
    high = ((a + 0.055) / 1.055) ** 2.4
    return np.where(a <= 0.04045, low, high).astype(np.float32)


def srgb_encode(arr: np.ndarray) -> np.ndarray:
    """Linear intensities -> nonlinear sRGB, clipped to [0,1]."""
    a = np.clip(np.asarray(arr, dtype=np.float32), 0.0, 1.0)
    low = a * 12.92
    high = 1.055 * a ** (1.0 / 2.4) - 0.055
    return np.where(a <= 0.0031308, low, high).astype(np.float32)


def write_pfm(path, data: np.ndarray):
    """Write float32 PFM (little-endian scale header, bottom-up rows)."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim == 2:
        magic = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"PF"
    else:
        raise DataIoError(f"PFM supports (H,W) or (H,W,3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(magic + b"\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")  # negative scale == little-endian payload
        f.write(np.ascontiguousarray(arr[::-1]).astype("<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns (H,W) or (H,W,3) float32."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic not in (b"PF", b"Pf"):
            raise DataIoError(f"{path}: not a PFM file")
        dims = f.readline().split()
        if len(dims) != 2:
            raise DataIoError(f"{path}: malformed PFM dimensions")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        channels = 3 if magic == b"PF" else 1
        count = w * h * channels
        payload = f.read(count * 4)
        if len(payload) != count * 4:
            raise DataIoError(f"{path}: truncated PFM payload")
    endian = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(payload, dtype=endian).astype(np.float32)
    arr = arr.reshape(h, w, channels) if channels == 3 else arr.reshape(h, w)
    arr = arr[::-1].copy()
    if abs(scale) not in (0.0, 1.0):
        arr *= abs(scale)
    return arr


def read_png(path, srgb: bool = True) -> LinearImage:
    """Read a PNG into a LinearImage; decodes sRGB by default.

    8-bit RGB/RGBA/gray and 16-bit gray are supported. Gray inputs are
    replicated to 3 channels.
    """
    try:
        img = Image.open(path)
    except OSError as exc:
        raise DataIoError(f"{path}: {exc}") from exc
    mode = img.mode
    if mode in ("I;16", "I;16B", "I;16L", "I"):
        arr = np.asarray(img, dtype=np.float32) / 65535.0
    else:
        if mode not in ("RGB", "L"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    arr = np.clip(arr, 0.0, 1.0)
    if srgb:
        arr = srgb_decode(arr)
    return LinearImage(arr)


def write_png(path, img, srgb: bool = True):
    """Write an 8-bit PNG; encodes linear data to sRGB by default."""
    if isinstance(img, (LinearImage, ShadingMap, WBKernel)):
        arr = img.data
    else:
        arr = np.asarray(img, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    arr = srgb_encode(arr) if srgb else np.clip(arr, 0.0, 1.0)
    out = np.round(arr * 255.0).astype(np.uint8)
    Image.fromarray(out, mode="RGB").save(Path(path))


def write_mask_png(path, mask: np.ndarray):
    """Persist a boolean raster as an 8-bit grayscale PNG (0 or 255)."""
    out = np.where(np.asarray(mask, dtype=bool), 255, 0).astype(np.uint8)
    Image.fromarray(out, mode="L").save(Path(path))


def read_mask_png(path) -> np.ndarray:
    img = Image.open(path).convert("L")
    return np.asarray(img) >= 128
