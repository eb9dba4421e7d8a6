"""Built-in verification suites: physics identities, gradient checks and the
ground-truth reconstruction path.

The CLI's selftest/gradcheck subcommands and the acceptance tests share
these functions so there is exactly one definition of each check and its
tolerance.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import nets
from .autodiff import Tensor
from .imaging import (LinearImage, ShadingMap, chromaticity, divide_safe,
                      hadamard)
from .pipeline import oracle_decomposition, reconstruct_input
from .synth import SynthesisParams, gen_text_texture, synth_sample

CHROMA_TOL = 1e-5
ROUNDTRIP_TOL = 1e-5
IDENTITY_TOL = 1e-5
PRIMITIVE_GRAD_TOL = 1e-2
COMPOSED_GRAD_TOL = 2e-2
ORACLE_RECON_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    passed: bool
    value: float
    limit: float
    seconds: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (f"[{status}] {self.name}: {self.value:.3g} "
                f"(limit {self.limit:.3g}, {self.seconds:.2f}s)")


def _timed(name, limit, fn) -> CheckResult:
    t0 = time.monotonic()
    value = fn()
    dt = time.monotonic() - t0
    return CheckResult(name, bool(value <= limit), float(value), limit, dt)


# -- physics identity suite ----------------------------------------------------

def physics_suite(seed: int = 0, n_pixels: int = 1000) -> list:
    """Chromaticity scale invariance, compose/divide round trip and the
    white-balance chromaticity identity, on random synthetic data."""
    rng = np.random.default_rng(seed)
    side = int(np.ceil(np.sqrt(n_pixels)))
    results = []

    def chroma_invariance():
        pix = rng.uniform(0.05, 1.5, size=(side, side, 3)).astype(np.float32)
        worst = 0.0
        for s in (0.1, 0.73, 2.0, 7.0):
            c0 = chromaticity(pix)
            c1 = chromaticity(np.float32(s) * pix)
            joint = c0.mask & c1.mask
            worst = max(worst, float(np.abs(c0.data - c1.data)[joint].max()))
        return worst
    results.append(_timed("chromaticity scale invariance", CHROMA_TOL,
                          chroma_invariance))

    def roundtrip():
        tex = LinearImage(rng.uniform(0.0, 1.0, (side, side, 3)).astype(np.float32))
        shade = ShadingMap(rng.uniform(1e-3, 1.0, (side, side, 1)).astype(np.float32))
        back = divide_safe(hadamard(tex, shade), shade)
        return float(np.abs(back.data - tex.data).max())
    results.append(_timed("compose/divide round trip", ROUNDTRIP_TOL, roundtrip))

    def wb_identity():
        params = SynthesisParams(image_size=max(side, 16), seed=seed)
        worst = 0.0
        for i in range(4):
            sub = np.random.default_rng([seed, 77, i])
            tex = gen_text_texture(sub, params)
            sample = synth_sample(tex, params, sub)
            c_wb = chromaticity(sample.wb_gt)
            c_ref = chromaticity(hadamard(sample.material_gt, sample.texture))
            joint = sample.mask & c_wb.mask & c_ref.mask
            worst = max(worst, float(np.abs(c_wb.data - c_ref.data)[joint].max()))
        return worst
    results.append(_timed("white-balance chromaticity identity", IDENTITY_TOL,
                          wb_identity))
    return results


# -- gradient suite --------------------------------------------------------------

def _primitive_cases(rng):
    def t(shape, lo=-1.0, hi=1.0):
        return Tensor(rng.uniform(lo, hi, shape).astype(np.float32),
                      requires_grad=True)

    x = t((1, 2, 4, 4))
    y = t((1, 2, 4, 4))
    pos = t((1, 2, 4, 4), 0.5, 2.0)
    w = t((3, 2, 3, 3))
    b = t((3,))
    one_ch = t((1, 1, 4, 4))
    cases = {
        "add": (lambda a, b2: (a + b2).sum(), [x, y]),
        "sub": (lambda a, b2: (a - b2).sum(), [x, y]),
        "mul": (lambda a, b2: (a * b2).mean(), [x, y]),
        "div": (lambda a, b2: (a / b2).mean(), [x, pos]),
        "broadcast mul": (lambda a, c: (a * c).mean(), [x, one_ch]),
        "abs": (lambda a: a.abs().mean(), [t((1, 2, 4, 4), 0.2, 1.0)]),
        "clamp-min": (lambda a: L.clamp_min(a, 0.9).mean(), [pos]),
        "slice": (lambda a: a[:, :, 1:, :-1].mean(), [x]),
        "concat": (lambda a, b2: ad.concat([a, b2], axis=1).mean(), [x, y]),
        "sum axis": (lambda a: a.sum(axis=1, keepdims=True).mean(), [x]),
        "mean axis": (lambda a: a.mean(axis=1, keepdims=True).sum(), [x]),
        "leaky relu": (lambda a: ad.leaky_relu(a).mean(), [x]),
        "sigmoid": (lambda a: ad.sigmoid(a).mean(), [x]),
        "softplus": (lambda a: ad.softplus(a).mean(), [x]),
        "conv2d": (lambda a, ww, bb: ad.conv2d(a, ww, bb).mean(), [x, w, b]),
        "avg pool": (lambda a: ad.avg_pool2(a).mean(), [x]),
        "upsample": (lambda a: ad.upsample2(a).mean(), [x]),
    }
    return cases


def gradient_suite(seed: int = 0) -> list:
    """Finite-difference checks for every primitive and both composed
    objectives through the networks at 16x16."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, tensors) in _primitive_cases(rng).items():
        results.append(_timed(
            f"gradcheck {name}", PRIMITIVE_GRAD_TOL,
            lambda fn=fn, tensors=tensors: ad.fd_gradcheck(
                fn, tensors, tol=np.inf)))

    size = 16
    params = SynthesisParams(image_size=size, seed=seed)
    sub = np.random.default_rng([seed, 5])
    sample = synth_sample(gen_text_texture(sub, params), params, sub)
    weights = L.LossWeights()

    img = sample.input.data.transpose(2, 0, 1)[None]
    wb = sample.wb_gt.data.transpose(2, 0, 1)[None]
    kernel = sample.kernel_gt.transpose(2, 0, 1)[None]
    tex = sample.texture.data.transpose(2, 0, 1)[None]
    mask = sample.mask[None, None]

    wb_params = nets.init_params(nets.WB_CONFIG, seed)

    def wb_objective():
        img_t = Tensor(img)
        k_hat = nets.wbnet_forward(wb_params, img_t)
        wb_hat = k_hat * img_t
        rep = L.loss_wbn(k_hat, Tensor(kernel), L.chroma_of(wb_hat),
                         Tensor(L.chroma_of(wb)), L.intensity_of(wb_hat),
                         Tensor(L.intensity_of(img)), mask, weights)
        return rep.node

    results.append(_timed(
        "gradcheck stage-1 objective", COMPOSED_GRAD_TOL,
        lambda: ad.directional_gradcheck(
            wb_objective, wb_params, np.random.default_rng([seed, 11]),
            tol=np.inf)))

    smt_params = nets.init_params(nets.SMT_CONFIG, seed)

    def smt_objective():
        x_t = Tensor(wb)
        m_hat, lam_p = nets.smtnet_forward(smt_params, x_t)
        refl = m_hat * Tensor(tex)
        ratio = x_t / L.clamp_min(refl, 1e-6)
        lam_e = ratio.mean(axis=1, keepdims=True)
        rep = L.loss_smt(Tensor(L.chroma_of(wb)), L.chroma_of(refl), lam_p,
                         lam_e, refl * lam_p, x_t, m_hat, weights)
        return rep.node

    results.append(_timed(
        "gradcheck stage-2 objective", COMPOSED_GRAD_TOL,
        lambda: ad.directional_gradcheck(
            smt_objective, smt_params, np.random.default_rng([seed, 12]),
            tol=np.inf)))
    return results


# -- oracle reconstruction suite ---------------------------------------------------

def oracle_suite(seed: int = 0, n_samples: int = 64, image_size: int = 64) -> list:
    """Inject ground-truth factors and verify the input image comes back."""
    params = SynthesisParams(image_size=image_size, seed=seed)

    def recon_err():
        errs = []
        for i in range(n_samples):
            rng = np.random.default_rng([seed, 99, i])
            sample = synth_sample(gen_text_texture(rng, params), params, rng)
            decomp = oracle_decomposition(sample)
            recon = reconstruct_input(decomp)
            diff = np.abs(recon.data - sample.input.data)[sample.mask]
            errs.append(float(diff.mean()))
        return float(np.mean(errs))

    return [_timed("oracle-path reconstruction", ORACLE_RECON_TOL, recon_err)]


def run_all(seed: int = 0) -> list:
    return physics_suite(seed) + gradient_suite(seed) + oracle_suite(seed)
