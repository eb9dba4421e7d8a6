"""Training loops for both stages and the two-step inference path.

Stage 1 learns the white-balance kernel from synthetic ground truth.
Stage 2 learns material/shading separation self-supervised: only the input
white-balanced image and the texture feed the tape. The material and
scalar-shading ground truths are diagnostics; an audit walks every training
graph and fails hard if they ever reach it.

All randomness is derived from (seed, purpose, epoch) counters, so a run is
fully determined by its config and resuming from a checkpoint reproduces
the uninterrupted trajectory.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import losses as L
from . import metrics
from . import nets
from .autodiff import Tensor
from .errors import (CheckpointMismatch, DataIoError, FirewallViolation,
                     NonFiniteDetected, ShapeMismatch, TrainingAborted)
from .imaging import (DIVIDE_EPS, LinearImage, ShadingMap, WBKernel,
                      chromaticity, divide_safe, hadamard)
from .synth import Sample, load_manifest, load_sample


@dataclass(frozen=True)
class TrainConfig:
    manifest: str = ""
    out_dir: str = ""
    epochs: int = 20
    batch_size: int = 8
    lr: float = 2e-3
    seed: int = 0
    val_interval: int = 5
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    wb_source: str = "gt"        # stage 2: "gt" or a stage-1 checkpoint path
    div_eps: float = DIVIDE_EPS
    resume_from: str | None = None

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.val_interval < 1:
            raise ValueError("epochs, batch_size and val_interval must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")


@dataclass
class Decomposition:
    """Outputs of the two-step inference for one image."""

    wb_image: LinearImage
    wb_kernel: WBKernel
    material: LinearImage
    shading_predicted: ShadingMap
    reflectance: LinearImage
    shading_estimated: ShadingMap | None = None


@dataclass
class TrainResult:
    checkpoint: Path
    log: Path
    init_val: dict
    final_val: dict


MAX_CONSECUTIVE_SKIPS = 10


def _nchw(images) -> np.ndarray:
    return np.stack([img.transpose(2, 0, 1) for img in images]).astype(np.float32)


def _hwc(batch: np.ndarray, i: int) -> np.ndarray:
    return batch[i].transpose(1, 2, 0)


def _epoch_rng(seed: int, tag: int, epoch: int):
    return np.random.default_rng(np.random.SeedSequence([seed, tag, epoch]))


def load_split(manifest_path):
    records = load_manifest(manifest_path)
    base = Path(manifest_path).parent
    train = [load_sample(r, base) for r in records if r["split"] == "train"]
    val = [load_sample(r, base) for r in records if r["split"] != "train"]
    if not train or not val:
        raise DataIoError("manifest must contain both train and val samples")
    return train, val


@dataclass
class _Batch:
    image: np.ndarray        # (N,3,H,W) input I
    wb: np.ndarray           # (N,3,H,W)
    kernel: np.ndarray       # (N,3,H,W)
    texture: np.ndarray      # (N,3,H,W)
    mask: np.ndarray         # (N,1,H,W) bool
    samples: list


def _make_batch(samples) -> _Batch:
    return _Batch(
        image=_nchw([s.input.data for s in samples]),
        wb=_nchw([s.wb_gt.data for s in samples]),
        kernel=_nchw([s.kernel_gt for s in samples]),
        texture=_nchw([s.texture.data for s in samples]),
        mask=np.stack([s.mask for s in samples])[:, None],
        samples=list(samples))


def audit_training_graph(loss_node: Tensor, params: dict, allowed_inputs,
                         forbidden_arrays):
    """Walk the loss graph; fail if a gradient leaf is not whitelisted or any
    node aliases a diagnostic ground-truth buffer."""
    allowed = {id(p) for p in params.values()}
    allowed |= {id(t) for t in allowed_inputs}
    stack, seen = [loss_node], set()
    while stack:
        node = stack.pop()
        if id(node) in seen:
            continue
        seen.add(id(node))
        for arr in forbidden_arrays:
            if np.shares_memory(node.data, arr):
                raise FirewallViolation(
                    "diagnostic ground truth reached the training graph")
        if not node._parents and node.requires_grad and id(node) not in allowed:
            raise FirewallViolation("unregistered gradient leaf in the graph")
        stack.extend(node._parents)


# -- stage 1: white-balance kernel ----------------------------------------------

def _wb_loss_graph(params, batch: _Batch, w: L.LossWeights):
    img_t = Tensor(batch.image)
    kernel_hat = nets.wbnet_forward(params, img_t)
    wb_hat = kernel_hat * img_t
    chroma_hat = L.chroma_of(wb_hat)
    inten_hat = L.intensity_of(wb_hat)
    chroma_gt = L.chroma_of(batch.wb)
    inten_gt = L.intensity_of(batch.image)  # white balancing preserves brightness
    return L.loss_wbn(kernel_hat, Tensor(batch.kernel), chroma_hat,
                      Tensor(chroma_gt), inten_hat, Tensor(inten_gt),
                      batch.mask, w), img_t


def _wb_validate(params, val_samples, w: L.LossWeights) -> dict:
    batch = _make_batch(val_samples)
    with ad.no_grad():
        kernel_hat = nets.wbnet_forward(params, Tensor(batch.image)).data
    wb_hat = kernel_hat * batch.image
    report = L.loss_wbn(kernel_hat, batch.kernel, L.chroma_of(wb_hat),
                        L.chroma_of(batch.wb), L.intensity_of(wb_hat),
                        L.intensity_of(batch.image), batch.mask, w)
    angles = []
    for i, s in enumerate(val_samples):
        if len(s.lights) != 1:
            continue
        est = estimate_illuminant(_hwc(kernel_hat, i), s.mask)
        angles.append(metrics.angular_error(est, np.asarray(s.lights[0].rgb)))
    record = report.to_dict()
    record["angular_error_deg"] = float(np.mean(angles)) if angles else None
    return record


def estimate_illuminant(kernel: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Illuminant color implied by a kernel: per-channel masked median of the
    reciprocal, normalized to max 1."""
    sel = mask if mask.any() else np.ones_like(mask, dtype=bool)
    med = np.median(kernel[sel], axis=0)
    inv = 1.0 / np.maximum(med, 1e-6)
    return (inv / inv.max()).astype(np.float32)


# -- stage 2: material / shading separation ---------------------------------------

def _smt_inputs(params_wb, batch: _Batch, cfg: TrainConfig) -> np.ndarray:
    if cfg.wb_source == "gt":
        return batch.wb
    with ad.no_grad():
        kernel_hat = nets.wbnet_forward(params_wb, Tensor(batch.image)).data
    return kernel_hat * batch.image


def _smt_loss_graph(params, wb_input: np.ndarray, batch: _Batch,
                    w: L.LossWeights, div_eps: float):
    x_t = Tensor(wb_input)
    tex_t = Tensor(batch.texture)
    m_hat, lam_p = nets.smtnet_forward(params, x_t)
    refl_hat = m_hat * tex_t
    chroma_refl = L.chroma_of(refl_hat)
    chroma_wb = Tensor(L.chroma_of(wb_input))
    ratio = x_t / L.clamp_min(refl_hat, div_eps)
    lam_e = ratio.mean(axis=1, keepdims=True)
    recon = refl_hat * lam_p
    report = L.loss_smt(chroma_wb, chroma_refl, lam_p, lam_e, recon, x_t,
                        m_hat, w)
    return report, (x_t, tex_t, chroma_wb)


def _smt_validate(params, val_samples, cfg: TrainConfig) -> dict:
    batch = _make_batch(val_samples)
    wb_input = batch.wb
    with ad.no_grad():
        m_hat_t, lam_p_t = nets.smtnet_forward(params, Tensor(wb_input))
    m_hat, lam_p = m_hat_t.data, lam_p_t.data
    refl = m_hat * batch.texture
    ratio = wb_input / np.maximum(refl, cfg.div_eps)
    lam_e = ratio.mean(axis=1, keepdims=True)
    report = L.loss_smt(L.chroma_of(wb_input), L.chroma_of(refl), lam_p,
                        lam_e, refl * lam_p, wb_input, m_hat, cfg.weights)
    record = report.to_dict()
    # validation-only diagnostics against the withheld ground truths
    lam_gt = _nchw([s.shading_gt.data for s in val_samples])
    mat_gt = _nchw([s.material_gt.data for s in val_samples])
    record["diag_consistency"] = float(np.mean(np.abs(lam_p - lam_e)))
    record["diag_shading_err"] = float(np.mean(np.abs(lam_p - lam_gt)))
    record["diag_material_err"] = float(np.mean(np.abs(m_hat - mat_gt)))
    record["diag_chroma_wb_err"] = _masked_chroma_err(refl, wb_input, batch.mask)
    record["diag_chroma_gt_err"] = _masked_chroma_err(
        refl, mat_gt * batch.texture, batch.mask)
    return record


def _masked_chroma_err(a_nchw, b_nchw, mask_n1hw) -> float:
    errs = []
    for i in range(a_nchw.shape[0]):
        ca = chromaticity(a_nchw[i].transpose(1, 2, 0))
        cb = chromaticity(b_nchw[i].transpose(1, 2, 0))
        joint = ca.mask & cb.mask & mask_n1hw[i, 0]
        if joint.any():
            errs.append(float(np.abs(ca.data - cb.data)[joint].mean()))
    return float(np.mean(errs)) if errs else 0.0


# -- shared training loop ----------------------------------------------------------

def _train(stage: str, cfg: TrainConfig) -> TrainResult:
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_samples, val_samples = load_split(cfg.manifest)
    if cfg.batch_size > len(train_samples):
        raise ValueError("batch_size exceeds the training set size")

    net_cfg = nets.WB_CONFIG if stage == "wb" else nets.SMT_CONFIG
    if cfg.resume_from:
        _, net_cfg, params, opt, start_epoch, _ = nets.load_checkpoint(
            cfg.resume_from, expect_role=stage)
    else:
        params = nets.init_params(net_cfg, cfg.seed)
        opt = ad.AdamState()
        start_epoch = 0

    params_wb = None
    if stage == "smt" and cfg.wb_source != "gt":
        _, _, params_wb, _, _, _ = nets.load_checkpoint(
            cfg.wb_source, expect_role="wb")

    log_path = out_dir / f"train_{stage}.log.jsonl"
    log_f = open(log_path, "a" if cfg.resume_from else "w", encoding="utf-8")

    def validate() -> dict:
        if stage == "wb":
            return _wb_validate(params, val_samples, cfg.weights)
        return _smt_validate(params, val_samples, cfg)

    def log(record: dict):
        log_f.write(json.dumps(record, sort_keys=True) + "\n")

    init_val = validate()
    if start_epoch == 0:
        log({"step": 0, "epoch": 0, "split": "val", **init_val})

    steps_per_epoch = (len(train_samples) + cfg.batch_size - 1) // cfg.batch_size
    global_step = start_epoch * steps_per_epoch
    skips = 0
    final_val = init_val

    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = _epoch_rng(cfg.seed, 0x0E, epoch).permutation(len(train_samples))
        for lo in range(0, len(order), cfg.batch_size):
            idx = order[lo:lo + cfg.batch_size]
            batch = _make_batch([train_samples[i] for i in idx])
            ad.zero_grads(params)
            try:
                if stage == "wb":
                    report, _ = _wb_loss_graph(params, batch, cfg.weights)
                else:
                    wb_input = _smt_inputs(params_wb, batch, cfg)
                    report, inputs = _smt_loss_graph(
                        params, wb_input, batch, cfg.weights, cfg.div_eps)
                    forbidden = [s.material_gt.data for s in batch.samples] \
                        + [s.shading_gt.data for s in batch.samples]
                    audit_training_graph(report.node, params, inputs, forbidden)
                report.node.backward()
                ad.adam_step(params, opt, cfg.lr)
            except NonFiniteDetected:
                skips += 1
                if skips >= MAX_CONSECUTIVE_SKIPS:
                    log_f.close()
                    raise TrainingAborted(
                        f"{MAX_CONSECUTIVE_SKIPS} consecutive non-finite steps")
                log({"step": global_step + 1, "epoch": epoch, "split": "train",
                     "skipped": True})
                global_step += 1
                continue
            skips = 0
            log({"step": global_step + 1, "epoch": epoch, "split": "train",
                 **report.to_dict()})
            global_step += 1
        if epoch % cfg.val_interval == 0 or epoch == cfg.epochs:
            final_val = validate()
            log({"step": global_step, "epoch": epoch, "split": "val", **final_val})
            nets.save_checkpoint(out_dir / f"{stage}_e{epoch:03d}.ckpt", stage,
                                 net_cfg, params, opt, step=epoch, seed=cfg.seed)

    final_ckpt = out_dir / f"{stage}net.ckpt"
    nets.save_checkpoint(final_ckpt, stage, net_cfg, params, opt,
                         step=cfg.epochs, seed=cfg.seed)
    log_f.close()
    return TrainResult(checkpoint=final_ckpt, log=log_path,
                       init_val=init_val, final_val=final_val)


def train_wbnet(cfg: TrainConfig) -> TrainResult:
    """Train the white-balance kernel estimator against synthetic targets."""
    return _train("wb", cfg)


def train_smtnet(cfg: TrainConfig) -> TrainResult:
    """Train the separation network; self-supervised, texture as weak signal."""
    return _train("smt", cfg)


# -- inference ------------------------------------------------------------------

def _pad_reflect(arr: np.ndarray, divisor: int):
    h, w = arr.shape[:2]
    ph = (-h) % divisor
    pw = (-w) % divisor
    if ph or pw:
        arr = np.pad(arr, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    return arr, (h, w)


def infer(image: LinearImage, wb_ckpt, smt_ckpt,
          texture: LinearImage | None = None,
          div_eps: float = DIVIDE_EPS) -> Decomposition:
    """Full decomposition of one image: white balance, then separation."""
    _, wb_cfg, wb_params, _, _, _ = nets.load_checkpoint(wb_ckpt, expect_role="wb")
    _, smt_cfg, smt_params, _, _, _ = nets.load_checkpoint(smt_ckpt,
                                                           expect_role="smt")
    if len(smt_cfg.heads) != 2:
        raise CheckpointMismatch("separation checkpoint must have two heads")
    divisor = max(wb_cfg.divisor, smt_cfg.divisor)
    padded, (h, w) = _pad_reflect(image.data, divisor)
    x = _nchw([padded])
    with ad.no_grad():
        kernel = nets.wbnet_forward(wb_params, Tensor(x), wb_cfg).data
        wb_full = kernel * x
        m_hat, lam_p = nets.smtnet_forward(smt_params, Tensor(wb_full), smt_cfg)

    def crop(nchw):
        return nchw[0].transpose(1, 2, 0)[:h, :w]

    wb_img = LinearImage(crop(wb_full))
    material = LinearImage(crop(m_hat.data))
    shading_p = ShadingMap(crop(lam_p.data))
    if texture is not None:
        if texture.data.shape != image.data.shape:
            raise ShapeMismatch("texture shape must match the input image")
        refl = hadamard(material, texture)
        ratio = divide_safe(wb_img, refl, div_eps)
        shading_e = ShadingMap(
            np.maximum(ratio.data.mean(axis=2, keepdims=True), div_eps))
    else:
        # reflectance from the estimated texture: wb / (material * shading)
        est_tex = divide_safe(wb_img, hadamard(material, shading_p), div_eps)
        refl = hadamard(material, est_tex)
        shading_e = None
    kernel_img = WBKernel(crop(kernel))
    return Decomposition(wb_image=wb_img, wb_kernel=kernel_img,
                         material=material, shading_predicted=shading_p,
                         reflectance=refl, shading_estimated=shading_e)


def oracle_decomposition(sample: Sample, div_eps: float = DIVIDE_EPS) -> Decomposition:
    """Ground-truth shortcut that bypasses both networks."""
    refl = hadamard(sample.material_gt, sample.texture)
    ratio = divide_safe(sample.wb_gt, refl, div_eps)
    lam_e = ShadingMap(np.maximum(ratio.data.mean(axis=2, keepdims=True), div_eps))
    return Decomposition(
        wb_image=sample.wb_gt, wb_kernel=WBKernel(sample.kernel_gt),
        material=sample.material_gt, shading_predicted=sample.shading_gt,
        reflectance=refl, shading_estimated=lam_e)


def reconstruct_input(decomp: Decomposition, div_eps: float = DIVIDE_EPS) -> LinearImage:
    """Invert the white balance: input = wb_image / kernel."""
    return divide_safe(decomp.wb_image, decomp.wb_kernel, div_eps)
