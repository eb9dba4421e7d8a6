"""Synthetic training data with full ground truth.

Each sample is a document texture lit by one or two blackbody-locus lights,
each light modulated by its own smooth procedural shading field. The same
fields rendered under achromatic light give the white-balance target, and
the element-wise ratio of the two renders gives the kernel target.

The material and scalar-shading ground truths exist only as diagnostics:
training never reads them for gradients.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import image_io
from .errors import DataIoError, EmptyTextureSet, OutOfRange
from .imaging import (CCT_MAX, CCT_MIN, DIVIDE_EPS, IlluminantSpec, Light,
                      LinearImage, ShadingMap, WBKernel, apply_wb,
                      chromaticity, divide_safe, hadamard, mix_shadings,
                      planckian_rgb, render_shading)

COMPOSITE_CLIP = 2.0


@dataclass(frozen=True)
class SynthesisParams:
    image_size: int = 64
    shading_octaves: int = 3
    shading_amplitude: tuple = (0.35, 1.25)      # (lo, hi), lo > 0, hi <= 2
    shading_gradient: float = 0.5                # linear ramp strength, 0 disables
    material_tint: tuple = (0.8, 1.0)            # near-white RGB bounds
    material_variation: float = 0.03
    cct_range: tuple = (2500.0, 9500.0)
    light_intensity: tuple = (0.8, 1.25)
    two_light_prob: float = 0.5
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.shading_amplitude
        if lo <= 0 or hi < lo or hi > COMPOSITE_CLIP:
            raise OutOfRange(f"bad shading amplitude range ({lo}, {hi})")
        tlo, thi = self.material_tint
        if not 0 < tlo <= thi <= 1:
            raise OutOfRange(f"bad material tint range ({tlo}, {thi})")
        clo, chi = self.cct_range
        if not CCT_MIN <= clo <= chi <= CCT_MAX:
            raise OutOfRange(f"cct range ({clo}, {chi}) outside locus domain")
        if not 0.0 <= self.two_light_prob <= 1.0:
            raise OutOfRange("two_light_prob must lie in [0, 1]")
        if self.image_size < 8:
            raise OutOfRange("image_size must be at least 8")


@dataclass
class Sample:
    """One training record with full ground truth."""

    input: LinearImage
    wb_gt: LinearImage
    kernel_gt: np.ndarray        # (H, W, 3)
    texture: LinearImage
    material_gt: LinearImage
    shading_gt: ShadingMap       # 1 channel
    mask: np.ndarray             # (H, W) bool
    lights: tuple = ()
    mix_a: float = 1.0
    clip_rate: float = 0.0
    sample_id: str = ""


def _fade(t: np.ndarray) -> np.ndarray:
    return t * t * t * (t * (t * 6 - 15) + 10)


def value_noise(rng, height: int, width: int, cells: int) -> np.ndarray:
    """Smooth value noise in [0, 1] from a cells x cells random lattice."""
    lattice = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, height, endpoint=False)
    xs = np.linspace(0.0, cells, width, endpoint=False)
    yi = np.floor(ys).astype(int)
    xi = np.floor(xs).astype(int)
    fy = _fade(ys - yi)[:, None]
    fx = _fade(xs - xi)[None, :]
    v00 = lattice[np.ix_(yi, xi)]
    v01 = lattice[np.ix_(yi, xi + 1)]
    v10 = lattice[np.ix_(yi + 1, xi)]
    v11 = lattice[np.ix_(yi + 1, xi + 1)]
    top = v00 + fx * (v01 - v00)
    bot = v10 + fx * (v11 - v10)
    return (top + fy * (bot - top)).astype(np.float32)


def gen_shading_field(params: SynthesisParams, rng) -> ShadingMap:
    """Band-limited positive field: value-noise octaves plus a linear ramp,
    clamped to the amplitude range."""
    size = params.image_size
    lo, hi = params.shading_amplitude
    mid = 0.5 * (lo + hi)
    half = 0.5 * (hi - lo)
    signal = np.zeros((size, size), dtype=np.float32)
    amp_total = 0.0
    for k in range(params.shading_octaves):
        amp = 0.55 ** k
        cells = min(3 * 2 ** k, max(size // 4, 2))
        signal += amp * (2.0 * value_noise(rng, size, size, cells) - 1.0)
        amp_total += amp
    if amp_total > 0:
        signal *= 0.8 / amp_total
    if params.shading_gradient > 0:
        gx, gy = rng.uniform(-1.0, 1.0, size=2) * params.shading_gradient
        yy, xx = np.meshgrid(np.linspace(-0.5, 0.5, size),
                             np.linspace(-0.5, 0.5, size), indexing="ij")
        signal += (gx * xx + gy * yy).astype(np.float32)
    out = np.clip(mid + half * signal, lo, hi).astype(np.float32)
    return ShadingMap(out[:, :, None])


def gen_material(params: SynthesisParams, rng) -> LinearImage:
    """Near-white paper tint with slight low-frequency variation."""
    tlo, thi = params.material_tint
    tint = rng.uniform(tlo, thi, size=3)
    size = params.image_size
    out = np.empty((size, size, 3), dtype=np.float32)
    if params.material_variation > 0:
        wobble = params.material_variation * (
            2.0 * value_noise(rng, size, size, 2) - 1.0)
    else:
        wobble = np.zeros((size, size), dtype=np.float32)
    for c in range(3):
        out[:, :, c] = np.clip(tint[c] + wobble, tlo, thi)
    return LinearImage(out)


def gen_text_texture(rng, params: SynthesisParams, blank: bool = False) -> LinearImage:
    """Procedural document page: dark glyph-like boxes on a light ground."""
    size = params.image_size
    bg = rng.uniform(0.86, 0.97)
    tint = 1.0 + rng.uniform(-0.015, 0.015, size=3)
    page = np.clip(bg * tint, 0.82, 1.0).astype(np.float32)
    out = np.broadcast_to(page, (size, size, 3)).copy()
    if blank:
        return LinearImage(out)
    line_h = max(3, size // 14)
    gap = max(1, line_h // 3)
    margin = max(2, size // 16)
    y = margin
    while y + line_h <= size - margin:
        if rng.random() < 0.92:
            _draw_text_line(out, rng, y, line_h, margin, size)
        y += line_h + gap
    return LinearImage(out)


def _draw_text_line(out, rng, y, line_h, margin, size):
    x = margin + int(rng.integers(0, max(1, size // 10)))
    glyph_h = line_h - 1
    while x < size - margin - 2:
        word_w = int(rng.integers(2, max(3, size // 7)))
        word_w = min(word_w, size - margin - x)
        ink = rng.uniform(0.03, 0.25)
        color = np.full(3, ink, dtype=np.float32)
        if rng.random() < 0.15:
            color *= rng.uniform(0.5, 1.5, size=3)
            color = np.clip(color, 0.02, 0.29)
            # keep mean luminance dark even after the tint
            color *= min(1.0, 0.29 / max(color.mean(), 1e-6))
        out[y:y + glyph_h, x:x + word_w, :] = color
        x += word_w + int(rng.integers(1, max(2, line_h // 2 + 1)))


def draw_lights(params: SynthesisParams, rng) -> IlluminantSpec:
    n = 2 if rng.random() < params.two_light_prob else 1
    lights = []
    for _ in range(n):
        cct = float(rng.uniform(*params.cct_range))
        eta = float(rng.uniform(*params.light_intensity))
        lights.append(Light(rgb=tuple(planckian_rgb(cct)), eta=eta, cct=cct))
    return IlluminantSpec(tuple(lights))


def compose_sample(texture: LinearImage, material: LinearImage, lambdas,
                   spec: IlluminantSpec, mix_a: float = 1.0,
                   sample_id: str = "") -> Sample:
    """Deterministic core: compose a Sample from explicit factors.

    lambdas holds one scalar shading field per light. With two lights the
    colored renders are blended with weight mix_a; one light ignores it.
    """
    colored_parts = [render_shading(IlluminantSpec((light,)), [lam])
                     for light, lam in zip(spec.lights, lambdas)]
    flat_parts = [ShadingMap(lam.data * np.float32(light.eta))
                  for light, lam in zip(spec.lights, lambdas)]
    if spec.count == 2:
        colored = mix_shadings(colored_parts[0], colored_parts[1], mix_a)
        lam_eff = mix_shadings(flat_parts[0], flat_parts[1], mix_a)
    else:
        colored, lam_eff = colored_parts[0], flat_parts[0]

    raw_input = hadamard(texture, hadamard(material, colored)).data
    raw_wb = hadamard(texture, hadamard(material, lam_eff)).data
    clipped = (raw_input > COMPOSITE_CLIP).any(axis=2) \
        | (raw_wb > COMPOSITE_CLIP).any(axis=2)
    inp = LinearImage(np.minimum(raw_input, COMPOSITE_CLIP))
    wb = LinearImage(np.minimum(raw_wb, COMPOSITE_CLIP))
    kernel = divide_safe(wb, inp).data
    # pixels below the division guard count as invalid ground truth
    floor = DIVIDE_EPS
    mask = (~clipped) & (inp.data > floor).all(axis=2) \
        & (wb.data > floor).all(axis=2) & (texture.data > floor).all(axis=2)
    return Sample(input=inp, wb_gt=wb, kernel_gt=kernel, texture=texture,
                  material_gt=material, shading_gt=lam_eff, mask=mask,
                  lights=spec.lights, mix_a=float(mix_a),
                  clip_rate=float(clipped.mean()), sample_id=sample_id)


def synth_sample(texture: LinearImage, params: SynthesisParams, rng,
                 sample_id: str = "") -> Sample:
    """Draw lights, shading fields and material, then compose."""
    spec = draw_lights(params, rng)
    material = gen_material(params, rng)
    lambdas = [gen_shading_field(params, rng) for _ in spec.lights]
    mix_a = float(rng.uniform()) if spec.count == 2 else 1.0
    return compose_sample(texture, material, lambdas, spec, mix_a, sample_id)


def check_sample_identities(sample: Sample, tol: float = 1e-5):
    """Assert the construction identities on masked pixels."""
    m = sample.mask
    if not m.any():
        raise AssertionError("sample mask is empty")
    wb_back = apply_wb(WBKernel(sample.kernel_gt), sample.input).data
    err_wb = np.abs(wb_back - sample.wb_gt.data)[m].max()
    if err_wb > tol:
        raise AssertionError(f"kernel identity violated: {err_wb:.3g}")
    c_wb = chromaticity(sample.wb_gt)
    c_ref = chromaticity(hadamard(sample.material_gt, sample.texture))
    both = m & c_wb.mask & c_ref.mask
    err_ch = np.abs(c_wb.data - c_ref.data)[both].max()
    if err_ch > tol:
        raise AssertionError(f"chromaticity identity violated: {err_ch:.3g}")
    recon = hadamard(sample.texture,
                     hadamard(sample.material_gt, sample.shading_gt)).data
    err_rc = np.abs(recon - sample.wb_gt.data)[m].max()
    if err_rc > tol:
        raise AssertionError(f"composition identity violated: {err_rc:.3g}")


# -- dataset persistence ---------------------------------------------------------

def _sample_rng(master_seed: int, index: int):
    return np.random.default_rng(np.random.SeedSequence([master_seed, index]))


def _load_textures(texture_dir) -> list:
    paths = sorted(p for p in Path(texture_dir).iterdir()
                   if p.suffix.lower() in (".png", ".pfm"))
    if not paths:
        raise EmptyTextureSet(f"no .png or .pfm textures under {texture_dir}")
    return paths


def _read_texture(path, size: int) -> LinearImage:
    if path.suffix.lower() == ".pfm":
        arr = image_io.read_pfm(path)
        if arr.ndim == 2:
            arr = np.repeat(arr[:, :, None], 3, axis=2)
        img = LinearImage(np.clip(arr, 0.0, None))
    else:
        img = image_io.read_png(path, srgb=True)
    if img.data.shape[:2] != (size, size):
        img = LinearImage(_resize_bilinear(img.data, size, size))
    return img


def _resize_bilinear(arr: np.ndarray, h: int, w: int) -> np.ndarray:
    sh, sw = arr.shape[:2]
    ys = np.linspace(0, sh - 1, h)
    xs = np.linspace(0, sw - 1, w)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, sh - 1)
    x1 = np.minimum(x0 + 1, sw - 1)
    fy = (ys - y0)[:, None, None]
    fx = (xs - x0)[None, :, None]
    a = arr[np.ix_(y0, x0)]
    b = arr[np.ix_(y0, x1)]
    c = arr[np.ix_(y1, x0)]
    d = arr[np.ix_(y1, x1)]
    top = a + fx * (b - a)
    bot = c + fx * (d - c)
    return (top + fy * (bot - top)).astype(np.float32)


def _build_one(index: int, split: str, params: SynthesisParams,
               texture_paths, out_dir: Path) -> dict:
    rng = _sample_rng(params.seed, index)
    sid = f"s{index:05d}"
    if texture_paths:
        tex_path = texture_paths[int(rng.integers(0, len(texture_paths)))]
        texture = _read_texture(tex_path, params.image_size)
    else:
        texture = gen_text_texture(rng, params)
    sample = synth_sample(texture, params, rng, sample_id=sid)
    rel = {
        "input": f"{sid}.input.pfm",
        "wb_gt": f"{sid}.wb.pfm",
        "kernel_gt": f"{sid}.kernel.pfm",
        "texture": f"{sid}.texture.pfm",
        "material_gt": f"{sid}.material.pfm",
        "shading_gt": f"{sid}.shading.pfm",
        "mask": f"{sid}.mask.png",
    }
    image_io.write_pfm(out_dir / rel["input"], sample.input.data)
    image_io.write_pfm(out_dir / rel["wb_gt"], sample.wb_gt.data)
    image_io.write_pfm(out_dir / rel["kernel_gt"], sample.kernel_gt)
    image_io.write_pfm(out_dir / rel["texture"], sample.texture.data)
    image_io.write_pfm(out_dir / rel["material_gt"], sample.material_gt.data)
    image_io.write_pfm(out_dir / rel["shading_gt"], sample.shading_gt.data)
    image_io.write_mask_png(out_dir / rel["mask"], sample.mask)
    record = {"id": sid, "split": split, "seed": params.seed, "index": index,
              "mix_a": sample.mix_a, "clip_rate": sample.clip_rate,
              "lights": [{"cct": lt.cct, "rgb": list(lt.rgb), "eta": lt.eta}
                         for lt in sample.lights]}
    record.update(rel)
    return record


def build_dataset(texture_dir, params: SynthesisParams, out_dir,
                  n_train: int = 256, n_val: int = 64, threads: int = 1) -> Path:
    """Write n_train + n_val samples plus a JSONL manifest; returns its path.

    Paths inside the manifest are relative to the manifest's directory.
    Sample i is generated from (params.seed, i), so rebuilds and parallel
    builds are byte-identical.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    texture_paths = _load_textures(texture_dir) if texture_dir else None
    jobs = [(i, "train" if i < n_train else "val")
            for i in range(n_train + n_val)]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(
                lambda job: _build_one(job[0], job[1], params,
                                       texture_paths, out_dir), jobs))
    else:
        records = [_build_one(i, split, params, texture_paths, out_dir)
                   for i, split in jobs]
    manifest = out_dir / "manifest.jsonl"
    with open(manifest, "w", encoding="utf-8") as f:
        for rec in records:
            f.write(json.dumps(rec, sort_keys=True) + "\n")
    return manifest


def load_manifest(manifest_path) -> list:
    path = Path(manifest_path)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise DataIoError(f"{path}: {exc}") from exc
    return [json.loads(line) for line in lines if line.strip()]


def load_sample(record: dict, base_dir) -> Sample:
    base = Path(base_dir)
    lights = tuple(Light(rgb=tuple(lt["rgb"]), eta=lt["eta"], cct=lt.get("cct"))
                   for lt in record["lights"])
    shading = image_io.read_pfm(base / record["shading_gt"])
    return Sample(
        input=LinearImage(image_io.read_pfm(base / record["input"])),
        wb_gt=LinearImage(image_io.read_pfm(base / record["wb_gt"])),
        kernel_gt=image_io.read_pfm(base / record["kernel_gt"]),
        texture=LinearImage(image_io.read_pfm(base / record["texture"])),
        material_gt=LinearImage(image_io.read_pfm(base / record["material_gt"])),
        shading_gt=ShadingMap(shading),
        mask=image_io.read_mask_png(base / record["mask"]),
        lights=lights, mix_a=record.get("mix_a", 1.0),
        clip_rate=record.get("clip_rate", 0.0), sample_id=record["id"])
