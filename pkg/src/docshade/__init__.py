"""Document reflectance estimation toolkit.

Physically grounded white balancing and shading/material separation for
document photographs, with a synthetic data generator, a minimal
reverse-mode autodiff engine, toy training pipelines and evaluation
metrics.
"""

from .imaging import (ChromaticityMap, IlluminantSpec, Light, LinearImage,
                      ShadingMap, WBKernel, apply_wb, chromaticity,
                      divide_safe, hadamard, intensity, mix_shadings,
                      planckian_rgb, render_shading)
from .losses import LossReport, LossWeights, loss_smt, loss_wbn, masked_l1
from .metrics import angular_error, cer, local_distortion, ms_ssim, run_ocr, wer
from .pipeline import Decomposition, TrainConfig, infer, train_smtnet, train_wbnet
from .synth import Sample, SynthesisParams, build_dataset, synth_sample

__version__ = "0.1.0"

__all__ = [
    "ChromaticityMap", "IlluminantSpec", "Light", "LinearImage", "ShadingMap",
    "WBKernel", "apply_wb", "chromaticity", "divide_safe", "hadamard",
    "intensity", "mix_shadings", "planckian_rgb", "render_shading",
    "LossReport", "LossWeights", "loss_smt", "loss_wbn", "masked_l1",
    "angular_error", "cer", "local_distortion", "ms_ssim", "run_ocr", "wer",
    "Decomposition", "TrainConfig", "infer", "train_smtnet", "train_wbnet",
    "Sample", "SynthesisParams", "build_dataset", "synth_sample",
    "__version__",
]
