"""Training objectives for both stages, plus their evaluation twins.

Every loss here accepts either engine Tensors (differentiable, for the
training tape) or plain numpy arrays (the non-differentiable twin used for
validation). The formulas are written once against a tiny dispatch layer.

Stage 1 combines a kernel term, a chromaticity term and an intensity term.
Stage 2 combines chromatic consistency, shading consistency, reconstruction
and two smoothness regularizers: mean L1 of the material's first spatial
differences and of the shading's 5-point discrete Laplacian.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch, TooSmall

CHROMA_EPS = 1e-4


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for the combined objectives."""

    alpha1: float = 1.0   # chromaticity term, stage 1
    alpha2: float = 0.1   # intensity term, stage 1
    beta1: float = 2.0    # shading consistency, stage 2
    beta2: float = 1.0    # reconstruction, stage 2
    beta3: float = 0.3    # shading Laplacian smoothness, stage 2
    beta4: float = 0.05   # material gradient smoothness, stage 2

    def __post_init__(self):
        for name in ("alpha1", "alpha2", "beta1", "beta2", "beta3", "beta4"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass
class LossReport:
    """Scalar total plus its unweighted per-term breakdown.

    node holds the differentiable total when the loss was built on the
    tape; it is None for the evaluation twin.
    """

    total: float
    terms: dict
    node: Tensor | None = None

    def to_dict(self) -> dict:
        d = {"total": self.total}
        d.update(self.terms)
        return d


# -- dispatch helpers ----------------------------------------------------------

def _is_t(x) -> bool:
    return isinstance(x, Tensor)

def _val(x) -> np.ndarray:
    return x.data if _is_t(x) else np.asarray(x, dtype=np.float32)

def _abs(x):
    return x.abs() if _is_t(x) else np.abs(x)

def _sum(x):
    return x.sum() if _is_t(x) else np.sum(x, dtype=np.float64)

def _mean(x):
    return x.mean() if _is_t(x) else np.mean(x, dtype=np.float64)

def _sum_channels(x, axis):
    return x.sum(axis=axis, keepdims=True) if _is_t(x) \
        else np.sum(x, axis=axis, keepdims=True)

def clamp_min(x, lo):
    """max(x, lo) on either a Tensor or an ndarray."""
    return ad.maximum_scalar(x, lo) if _is_t(x) else np.maximum(x, lo)

def _scalar(x) -> float:
    return x.item() if _is_t(x) else float(x)


def _channel_axis(x) -> int:
    """Channel axis: 1 for NCHW tensors, -1 for HWC rasters."""
    return 1 if _val(x).ndim == 4 else -1


def chroma_of(x, eps: float = CHROMA_EPS):
    """Differentiable chromaticity: x / (channel sum + eps)."""
    s = _sum_channels(x, _channel_axis(x))
    return x / (s + float(eps))


def intensity_of(x):
    """Per-pixel channel sum (keeps the channel axis, size 1)."""
    return _sum_channels(x, _channel_axis(x))


def _check_shapes(a, b):
    if _val(a).shape != _val(b).shape:
        raise ShapeMismatch(f"{_val(a).shape} vs {_val(b).shape}")


def l1(a, b):
    """Mean absolute difference over all elements."""
    _check_shapes(a, b)
    return _mean(_abs(a - b))


def masked_l1(a, b, mask: np.ndarray):
    """Mean absolute difference over masked elements; 0 if the mask is empty.

    mask is always a plain boolean array; it broadcasts across channels.
    """
    _check_shapes(a, b)
    shape = _val(a).shape
    m = np.broadcast_to(np.asarray(mask, dtype=bool), shape)
    count = float(m.sum())
    if count == 0.0:
        return Tensor(0.0) if _is_t(a) else 0.0
    mf = m.astype(np.float32)
    weighted = _abs(a - b) * (Tensor(mf) if _is_t(a) else mf)
    return _sum(weighted) / count


def spatial_grad_l1(x):
    """Mean |forward difference| over both spatial directions."""
    v = _val(x)
    h_ax, w_ax = v.ndim - 2, v.ndim - 1
    if v.shape[h_ax] < 3 or v.shape[w_ax] < 3:
        raise TooSmall(f"need at least 3x3, got {v.shape}")
    sl = _slicer(v.ndim)
    dx = x[sl(w_ax, slice(1, None))] - x[sl(w_ax, slice(None, -1))]
    dy = x[sl(h_ax, slice(1, None))] - x[sl(h_ax, slice(None, -1))]
    n = _val(dx).size + _val(dy).size
    return (_sum(_abs(dx)) + _sum(_abs(dy))) / float(n)


def laplacian_l1(x):
    """Mean |5-point Laplacian| over interior pixels."""
    v = _val(x)
    h_ax, w_ax = v.ndim - 2, v.ndim - 1
    if v.shape[h_ax] < 3 or v.shape[w_ax] < 3:
        raise TooSmall(f"need at least 3x3, got {v.shape}")
    sl = _slicer(v.ndim)
    inner = slice(1, -1)
    up = sl(h_ax, slice(None, -2), w_ax, inner)
    down = sl(h_ax, slice(2, None), w_ax, inner)
    left = sl(h_ax, inner, w_ax, slice(None, -2))
    right = sl(h_ax, inner, w_ax, slice(2, None))
    center = sl(h_ax, inner, w_ax, inner)
    lap = x[up] + x[down] + x[left] + x[right] - 4.0 * x[center]
    return _mean(_abs(lap))


def _slicer(ndim: int):
    def make(*pairs):
        idx = [slice(None)] * ndim
        for ax, s in zip(pairs[::2], pairs[1::2]):
            idx[ax] = s
        return tuple(idx)
    return make


# -- combined objectives ---------------------------------------------------------

def loss_wbn(wb_hat, wb_gt, chroma_hat, chroma_gt, inten_hat, inten_gt,
             mask: np.ndarray, w: LossWeights) -> LossReport:
    """Stage-1 objective: masked kernel and chromaticity L1 plus unmasked
    intensity L1, combined as kernel + alpha1*chroma + alpha2*intensity."""
    term_wb = masked_l1(wb_hat, wb_gt, mask)
    term_ch = masked_l1(chroma_hat, chroma_gt, mask)
    term_int = l1(inten_hat, inten_gt)
    total = term_wb + w.alpha1 * term_ch + w.alpha2 * term_int
    terms = {"wb": _scalar(term_wb), "chroma": _scalar(term_ch),
             "intensity": _scalar(term_int)}
    return LossReport(total=_scalar(total), terms=terms,
                      node=total if _is_t(total) else None)


def loss_smt(chroma_wb, chroma_refl, lambda_p, lambda_e, recon, wb_in,
             m_hat, w: LossWeights) -> LossReport:
    """Stage-2 objective.

    chroma consistency + beta1*shading consistency + beta2*reconstruction
    + beta3*|Laplacian(shading)| + beta4*|grad(material)|.
    """
    _check_shapes(lambda_p, lambda_e)
    lp = _val(lambda_p)
    ch_ax = _channel_axis(lambda_p)
    if lp.shape[ch_ax] != 1:
        raise ShapeMismatch("shading maps must have one channel")
    term_cc = l1(chroma_wb, chroma_refl)
    term_sc = l1(lambda_p, lambda_e)
    term_r = l1(recon, wb_in)
    term_lap = laplacian_l1(lambda_p)
    term_grad = spatial_grad_l1(m_hat)
    total = (term_cc + w.beta1 * term_sc + w.beta2 * term_r
             + w.beta3 * term_lap + w.beta4 * term_grad)
    terms = {"chroma_cc": _scalar(term_cc), "shading_sc": _scalar(term_sc),
             "recon": _scalar(term_r), "lap_smooth": _scalar(term_lap),
             "grad_smooth": _scalar(term_grad)}
    return LossReport(total=_scalar(total), terms=terms,
                      node=total if _is_t(total) else None)
