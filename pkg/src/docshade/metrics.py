"""Evaluation measures: MS-SSIM, block-matching local distortion, edit-rate
OCR scores and the angular illuminant error.

Local distortion here is a deliberately simple block matcher (normalized
cross-correlation over an exhaustive offset search); it is meant for
relative comparisons, not for parity with flow-based formulations. OCR is
strictly optional and runs through an external command template.
"""

from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field

import numpy as np

from .errors import EmptyReference, ShapeMismatch, TooSmall, ZeroVector
from .imaging import LinearImage

# canonical per-scale weights for 5-level multi-scale structural similarity
MSSSIM_WEIGHTS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
LUMA = np.array([0.2126, 0.7152, 0.0722])


def _luminance(img) -> np.ndarray:
    arr = img.data if isinstance(img, LinearImage) else np.asarray(img)
    if arr.ndim == 3:
        arr = arr @ LUMA
    return arr.astype(np.float64)


def _gauss_kernel(size: int, sigma: float) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-(x * x) / (2.0 * sigma * sigma))
    return k / k.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable valid-mode correlation with a 1-D kernel."""
    k = kernel.size
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=0)
    img = np.tensordot(win, kernel, axes=([2], [0]))
    win = np.lib.stride_tricks.sliding_window_view(img, k, axis=1)
    return np.tensordot(win, kernel, axes=([2], [0]))


def _ssim_parts(x: np.ndarray, y: np.ndarray, data_range: float):
    kernel = _gauss_kernel(SSIM_WINDOW, SSIM_SIGMA)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_x = _filter_valid(x, kernel)
    mu_y = _filter_valid(y, kernel)
    var_x = np.maximum(_filter_valid(x * x, kernel) - mu_x * mu_x, 0.0)
    var_y = np.maximum(_filter_valid(y * y, kernel) - mu_y * mu_y, 0.0)
    cov = _filter_valid(x * y, kernel) - mu_x * mu_y
    lum = (2 * mu_x * mu_y + c1) / (mu_x * mu_x + mu_y * mu_y + c1)
    cs = (2 * cov + c2) / (var_x + var_y + c2)
    return float(np.mean(lum * cs)), float(np.mean(cs))


def _downsample2(img: np.ndarray) -> np.ndarray:
    h, w = img.shape
    img = img[:h - h % 2, :w - w % 2]
    return 0.25 * (img[0::2, 0::2] + img[0::2, 1::2]
                   + img[1::2, 0::2] + img[1::2, 1::2])


def ms_ssim(a, b, levels: int = 5, data_range: float = 1.0) -> float:
    """Multi-scale structural similarity on luminance.

    Uses the canonical per-scale weights; if the image cannot support the
    requested pyramid it falls back to single-scale SSIM, and raises
    TooSmall below the 11-pixel window.
    """
    x, y = _luminance(a), _luminance(b)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    if not 1 <= levels <= len(MSSSIM_WEIGHTS):
        raise ValueError(f"levels must lie in [1, {len(MSSSIM_WEIGHTS)}]")
    min_dim = min(x.shape)
    if min_dim < SSIM_WINDOW:
        raise TooSmall(f"min dimension {min_dim} < window {SSIM_WINDOW}")
    if min_dim < 2 ** (levels - 1) * SSIM_WINDOW:
        levels = 1
    if levels == 1:
        return _ssim_parts(x, y, data_range)[0]
    weights = np.asarray(MSSSIM_WEIGHTS[:levels])
    weights = weights / weights.sum()
    score = 1.0
    for lvl in range(levels):
        ssim_full, cs = _ssim_parts(x, y, data_range)
        if lvl < levels - 1:
            score *= max(cs, 0.0) ** weights[lvl]
            x, y = _downsample2(x), _downsample2(y)
        else:
            score *= max(ssim_full, 0.0) ** weights[lvl]
    return float(score)


def local_distortion(a, b, block: int = 8, search: int = 4) -> float:
    """Mean best-match block displacement between two images, in pixels.

    Non-overlapping blocks of `a` are matched in `b` by normalized
    cross-correlation over all integer offsets within the search radius.
    Flat blocks carry no signal and are skipped.
    """
    x, y = _luminance(a), _luminance(b)
    if x.shape != y.shape:
        raise ShapeMismatch(f"{x.shape} vs {y.shape}")
    h, w = x.shape
    if h < block + 2 * search or w < block + 2 * search:
        raise TooSmall(f"image {h}x{w} too small for block {block}, "
                       f"search {search}")
    offsets = sorted(((dy, dx) for dy in range(-search, search + 1)
                      for dx in range(-search, search + 1)),
                     key=lambda o: (o[0] * o[0] + o[1] * o[1]))
    displacements = []
    for by in range(search, h - block - search + 1, block):
        for bx in range(search, w - block - search + 1, block):
            ref = x[by:by + block, bx:bx + block]
            ref = ref - ref.mean()
            norm_r = np.sqrt((ref * ref).sum())
            if norm_r < 1e-9:
                continue
            best_score, best_off = -np.inf, (0, 0)
            for dy, dx in offsets:
                cand = y[by + dy:by + dy + block, bx + dx:bx + dx + block]
                cand = cand - cand.mean()
                norm_c = np.sqrt((cand * cand).sum())
                if norm_c < 1e-9:
                    continue
                score = float((ref * cand).sum()) / (norm_r * norm_c)
                if score > best_score + 1e-12:
                    best_score, best_off = score, (dy, dx)
            displacements.append(np.hypot(*best_off))
    return float(np.mean(displacements)) if displacements else 0.0


# -- OCR error rates ---------------------------------------------------------------

def _edit_distance(ref, hyp) -> int:
    """Levenshtein distance with a two-row table."""
    if len(ref) < len(hyp):
        ref, hyp = hyp, ref
    prev = list(range(len(hyp) + 1))
    for i, rc in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, hc in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1,
                         prev[j - 1] + (rc != hc))
        prev = cur
    return prev[-1]


def cer(reference: str, hypothesis: str) -> float:
    """Character error rate: edit distance / reference length."""
    if len(reference) == 0:
        raise EmptyReference("reference text is empty")
    return _edit_distance(reference, hypothesis) / len(reference)


def wer(reference: str, hypothesis: str) -> float:
    """Word error rate over whitespace-separated tokens."""
    ref_tokens = reference.split()
    if not ref_tokens:
        raise EmptyReference("reference has no words")
    return _edit_distance(ref_tokens, hypothesis.split()) / len(ref_tokens)


def angular_error(estimated: np.ndarray, true: np.ndarray) -> float:
    """Angle between two illuminant colors, in degrees."""
    a = np.asarray(estimated, dtype=np.float64)
    b = np.asarray(true, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("illuminant vectors must be nonzero")
    cos = np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


# -- external OCR -------------------------------------------------------------------

@dataclass
class OcrResult:
    status: str          # "ok" | "unavailable" | "timeout" | "failed"
    text: str = ""
    detail: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"


def run_ocr(image_path, command_template: str, timeout: float = 60.0) -> OcrResult:
    """Run an external OCR command; never raises on a missing or broken tool.

    The template must contain an {input} placeholder, e.g.
    "tesseract {input} stdout".
    """
    if "{input}" not in command_template:
        raise ValueError("command template must contain {input}")
    cmd = shlex.split(command_template.format(input=str(image_path)))
    try:
        proc = subprocess.run(cmd, capture_output=True, timeout=timeout)
    except FileNotFoundError as exc:
        return OcrResult(status="unavailable", detail=str(exc))
    except subprocess.TimeoutExpired:
        return OcrResult(status="timeout", detail=f"timeout after {timeout}s")
    except OSError as exc:
        return OcrResult(status="unavailable", detail=str(exc))
    if proc.returncode != 0:
        return OcrResult(status="failed",
                         detail=proc.stderr.decode("utf-8", "replace")[:500])
    return OcrResult(status="ok", text=proc.stdout.decode("utf-8", "replace"))


# -- reporting ---------------------------------------------------------------------

@dataclass
class MetricReport:
    """Aggregate metrics (means of the per-sample table)."""

    per_sample: list = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.per_sample)

    def aggregate(self) -> dict:
        agg = {}
        if not self.per_sample:
            return agg
        keys = [k for k, v in self.per_sample[0].items()
                if isinstance(v, (int, float)) and not isinstance(v, bool)]
        for key in keys:
            vals = [row[key] for row in self.per_sample
                    if isinstance(row.get(key), (int, float))]
            if vals:
                agg[key] = float(np.mean(vals))
        return agg

    def to_dict(self) -> dict:
        return {"count": self.count, "aggregate": self.aggregate(),
                "per_sample": self.per_sample}

    def render_table(self) -> str:
        agg = self.aggregate()
        if not agg:
            return "(no metrics)"
        name_w = max(len(k) for k in agg)
        lines = [f"{'metric'.ljust(name_w)}  mean (n={self.count})"]
        lines += [f"{k.ljust(name_w)}  {v:.6g}" for k, v in sorted(agg.items())]
        return "\n".join(lines)
