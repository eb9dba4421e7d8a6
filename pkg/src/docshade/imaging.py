"""Image-formation algebra on linear-RGB rasters.

Everything in this module works on physical (linear) intensities. Gamma
encoding/decoding belongs to the file I/O layer, never here. All functions
are pure; inputs are treated as immutable.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CountMismatch, OutOfRange, ShapeMismatch

DIVIDE_EPS = 1e-6
CHROMA_EPS = 1e-4


def _as_f32(data) -> np.ndarray:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float32))


@dataclass
class LinearImage:
    """H x W x 3 raster of non-negative linear-RGB intensities."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("linear image contains non-finite values")
        if (self.data < 0).any():
            raise ValueError("linear image contains negative intensities")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def full(cls, height: int, width: int, value) -> "LinearImage":
        return cls(np.broadcast_to(np.asarray(value, dtype=np.float32),
                                   (height, width, 3)).copy())


@dataclass
class ShadingMap:
    """Strictly positive shading field, 1 channel (scalar) or 3 (colored)."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3 or self.data.shape[2] not in (1, 3):
            raise ShapeMismatch(f"expected (H, W, 1|3), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("shading map contains non-finite values")
        if (self.data <= 0).any():
            raise ValueError("shading map must be strictly positive")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def full(cls, height: int, width: int, value, channels: int = 1) -> "ShadingMap":
        return cls(np.full((height, width, channels), value, dtype=np.float32))


@dataclass
class WBKernel:
    """Per-pixel 3-channel white-balance correction factors, >= 0."""

    data: np.ndarray

    def __post_init__(self):
        self.data = _as_f32(self.data)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {self.data.shape}")
        if not np.isfinite(self.data).all():
            raise ValueError("kernel contains non-finite values")
        if (self.data < 0).any():
            raise ValueError("kernel factors must be non-negative")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def identity(cls, height: int, width: int) -> "WBKernel":
        return cls(np.ones((height, width, 3), dtype=np.float32))


@dataclass(frozen=True)
class Light:
    """One illuminant: RGB color with max channel 1, positive intensity."""

    rgb: tuple
    eta: float = 1.0
    cct: float | None = None

    def __post_init__(self):
        rgb = tuple(float(c) for c in self.rgb)
        object.__setattr__(self, "rgb", rgb)
        if len(rgb) != 3:
            raise ShapeMismatch("light color must be an RGB triple")
        if any(c <= 0 or c > 1 for c in rgb):
            raise OutOfRange(f"light channels must lie in (0, 1], got {rgb}")
        if self.eta <= 0:
            raise OutOfRange("light intensity must be positive")


@dataclass(frozen=True)
class IlluminantSpec:
    """A scene's light sources; at least one."""

    lights: tuple

    def __post_init__(self):
        lights = tuple(self.lights)
        object.__setattr__(self, "lights", lights)
        if len(lights) < 1:
            raise CountMismatch("at least one light required")

    @property
    def count(self) -> int:
        return len(self.lights)


@dataclass
class ChromaticityMap:
    """Per-pixel intensity-normalized color plus a validity mask.

    Where the mask is true the three channels sum to 1; elsewhere the
    map holds the neutral convention (1/3, 1/3, 1/3).
    """

    data: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.data = _as_f32(self.data)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[2] != 3:
            raise ShapeMismatch(f"expected (H, W, 3), got {self.data.shape}")
        if self.mask.shape != self.data.shape[:2]:
            raise ShapeMismatch("mask shape must match spatial shape")


def _raster(x) -> np.ndarray:
    if isinstance(x, (LinearImage, ShadingMap, WBKernel)):
        return x.data
    return np.asarray(x, dtype=np.float32)


def _check_spatial(a: np.ndarray, b: np.ndarray):
    if a.shape[:2] != b.shape[:2]:
        raise ShapeMismatch(f"spatial shapes differ: {a.shape[:2]} vs {b.shape[:2]}")


def hadamard(a, b):
    """Element-wise product; a 1-channel factor broadcasts across 3 channels.

    Returns a LinearImage when the result has 3 channels, else a ShadingMap.
    """
    da, db = _raster(a), _raster(b)
    _check_spatial(da, db)
    if da.shape[2] != db.shape[2] and 1 not in (da.shape[2], db.shape[2]):
        raise ShapeMismatch(f"channel counts differ: {da.shape[2]} vs {db.shape[2]}")
    out = da * db
    if out.shape[2] == 1:
        return ShadingMap(out)
    return LinearImage(out)


def divide_safe(num, den, eps: float = DIVIDE_EPS) -> LinearImage:
    """Element-wise num / max(den, eps); finite everywhere."""
    if eps <= 0:
        raise OutOfRange("eps must be positive")
    dn, dd = _raster(num), _raster(den)
    _check_spatial(dn, dd)
    out = dn / np.maximum(dd, np.float32(eps))
    return LinearImage(out)


def chromaticity(img, eps: float = CHROMA_EPS) -> ChromaticityMap:
    """Per-pixel c / (r+g+b); dark pixels map to neutral with mask=False."""
    if eps <= 0:
        raise OutOfRange("eps must be positive")
    data = _raster(img)
    sums = data.sum(axis=2, keepdims=True)
    mask = sums[:, :, 0] > eps
    safe = np.where(sums > eps, sums, np.float32(1.0))
    chroma = np.where(mask[:, :, None], data / safe, np.float32(1.0 / 3.0))
    return ChromaticityMap(chroma, mask)


def intensity(img) -> np.ndarray:
    """Per-pixel channel sum, shape (H, W)."""
    return _raster(img).sum(axis=2)


def apply_wb(kernel: WBKernel, img: LinearImage) -> LinearImage:
    """Per-pixel, per-channel multiplicative white-balance correction."""
    dk, di = _raster(kernel), _raster(img)
    if dk.shape != di.shape:
        raise ShapeMismatch(f"kernel {dk.shape} vs image {di.shape}")
    return LinearImage(dk * di)


def render_shading(spec: IlluminantSpec, lambdas) -> ShadingMap:
    """Colored shading from per-light scalar fields: sum_i eta_i * lambda_i * rgb_i."""
    lambdas = list(lambdas)
    if len(lambdas) != spec.count:
        raise CountMismatch(f"{spec.count} lights but {len(lambdas)} shading fields")
    shape = None
    acc = None
    for light, lam in zip(spec.lights, lambdas):
        dl = _raster(lam)
        if dl.shape[2] != 1:
            raise ShapeMismatch("per-light shading fields must have 1 channel")
        if shape is None:
            shape = dl.shape[:2]
        elif dl.shape[:2] != shape:
            raise ShapeMismatch("shading fields disagree on spatial shape")
        color = np.asarray(light.rgb, dtype=np.float32) * np.float32(light.eta)
        term = dl * color[None, None, :]
        acc = term if acc is None else acc + term
    return ShadingMap(acc)


def mix_shadings(ms1: ShadingMap, ms2: ShadingMap, a: float) -> ShadingMap:
    """Convex combination a*ms1 + (1-a)*ms2."""
    if not 0.0 <= a <= 1.0:
        raise OutOfRange(f"mix coefficient must lie in [0, 1], got {a}")
    d1, d2 = _raster(ms1), _raster(ms2)
    if d1.shape != d2.shape:
        raise ShapeMismatch(f"{d1.shape} vs {d2.shape}")
    a32 = np.float32(a)
    return ShadingMap(a32 * d1 + (np.float32(1.0) - a32) * d2)


# CCT -> xy uses the cubic-spline fit to the blackbody locus that is standard
# in colorimetry references; xy -> linear RGB uses sRGB primaries (D65).
_XYZ_TO_RGB = np.array([
    [3.2404542, -1.5371385, -0.4985314],
    [-0.9692660, 1.8760108, 0.0415560],
    [0.0556434, -0.2040259, 1.0572252],
], dtype=np.float64)

CCT_MIN = 1667.0
CCT_MAX = 25000.0


def planckian_xy(cct: float) -> tuple:
    """Blackbody chromaticity (x, y) for a correlated color temperature."""
    if not CCT_MIN <= cct <= CCT_MAX:
        raise OutOfRange(f"cct {cct} outside [{CCT_MIN}, {CCT_MAX}] K")
    t = float(cct)
    if t <= 4000.0:
        x = (-0.2661239e9 / t**3 - 0.2343589e6 / t**2
             + 0.8776956e3 / t + 0.179910)
    else:
        x = (-3.0258469e9 / t**3 + 2.1070379e6 / t**2
             + 0.2226347e3 / t + 0.240390)
    if t <= 2222.0:
        y = (-1.1063814 * x**3 - 1.34811020 * x**2
             + 2.18555832 * x - 0.20219683)
    elif t <= 4000.0:
        y = (-0.9549476 * x**3 - 1.37418593 * x**2
             + 2.09137015 * x - 0.16748867)
    else:
        y = (3.0817580 * x**3 - 5.87338670 * x**2
             + 3.75112997 * x - 0.37001483)
    return x, y


def planckian_rgb(cct: float) -> np.ndarray:
    """Linear-RGB illuminant color on the blackbody locus, max channel = 1.

    Extreme temperatures fall slightly outside the RGB gamut; channels are
    floored at a small positive value so the result is always a valid light.
    """
    x, y = planckian_xy(cct)
    xyz = np.array([x / y, 1.0, (1.0 - x - y) / y], dtype=np.float64)
    rgb = _XYZ_TO_RGB @ xyz
    rgb = np.maximum(rgb, 1e-4)
    rgb = rgb / rgb.max()
    return rgb.astype(np.float32)
