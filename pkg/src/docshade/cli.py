"""Command-line entry point.

One executable with subcommands for synthesis, training, inference,
evaluation and the built-in verification suites. A JSON config file can
seed any subcommand's options; explicit flags win. Every run writes its
fully resolved configuration next to its outputs.

Exit codes: 0 success, 1 contract failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import image_io, metrics, nets, selftest
from .errors import DocshadeError, UsageError
from .imaging import LinearImage, hadamard
from .losses import LossWeights
from .pipeline import (Decomposition, TrainConfig, infer, train_smtnet,
                       train_wbnet)
from .synth import SynthesisParams, build_dataset, load_manifest

THREADS_ENV = "DOCIIW_THREADS"

CONFIG_SECTIONS = ("synth", "train_wb", "train_smt", "eval")


def _default_threads(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(THREADS_ENV)
    if env:
        return int(env)
    return os.cpu_count() or 1


def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config root must be a JSON object")
    unknown = set(cfg) - set(CONFIG_SECTIONS)
    if unknown:
        raise UsageError(f"unknown config sections: {sorted(unknown)}")
    return cfg


def _section(cfg: dict, name: str, allowed) -> dict:
    body = cfg.get(name, {})
    if not isinstance(body, dict):
        raise UsageError(f"config section {name!r} must be an object")
    unknown = set(body) - set(allowed)
    if unknown:
        raise UsageError(f"unknown keys in config section {name!r}: "
                         f"{sorted(unknown)}")
    return dict(body)


def _write_resolved(out_dir, name: str, resolved: dict):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{name}.resolved.json", "w", encoding="utf-8") as f:
        json.dump(resolved, f, indent=2, sort_keys=True)
        f.write("\n")


def _weights_from(body: dict) -> LossWeights:
    fields = {f.name for f in dataclasses.fields(LossWeights)}
    return LossWeights(**{k: v for k, v in body.items() if k in fields})


# -- subcommands -----------------------------------------------------------------

def cmd_synth(args) -> int:
    body = _section(_load_config(args.config), "synth",
                    [f.name for f in dataclasses.fields(SynthesisParams)]
                    + ["n_train", "n_val", "textures"])
    n_train = args.samples if args.samples is not None \
        else body.pop("n_train", 256)
    n_val = args.val_samples if args.val_samples is not None \
        else body.pop("n_val", 64)
    textures = args.textures if args.textures is not None \
        else body.pop("textures", None)
    if args.size is not None:
        body["image_size"] = args.size
    if args.seed is not None:
        body["seed"] = args.seed
    params = SynthesisParams(**body)
    threads = _default_threads(args.threads)
    manifest = build_dataset(textures, params, args.out, n_train=n_train,
                             n_val=n_val, threads=threads)
    _write_resolved(args.out, "synth", {
        "params": dataclasses.asdict(params), "n_train": n_train,
        "n_val": n_val, "textures": str(textures) if textures else None,
        "threads": threads})
    print(f"wrote {n_train + n_val} samples, manifest at {manifest}")
    return 0


def _train_config(args, section: str) -> TrainConfig:
    fields = [f.name for f in dataclasses.fields(TrainConfig)] + ["weights"]
    body = _section(_load_config(args.config), section, fields)
    weights = _weights_from(body.pop("weights", {}))
    for flag in ("manifest", "out_dir", "epochs", "lr", "seed"):
        val = getattr(args, flag if flag != "out_dir" else "out", None)
        if val is not None:
            body[flag] = val
    if args.batch is not None:
        body["batch_size"] = args.batch
    if getattr(args, "wb_ckpt", None):
        body["wb_source"] = args.wb_ckpt
    if "manifest" not in body or "out_dir" not in body:
        raise UsageError("--manifest and --out are required")
    return TrainConfig(weights=weights, **body)


def cmd_train_wb(args) -> int:
    cfg = _train_config(args, "train_wb")
    _write_resolved(cfg.out_dir, "train_wb", _cfg_dict(cfg))
    res = train_wbnet(cfg)
    print(f"checkpoint: {res.checkpoint}")
    print(f"validation total: {res.init_val['total']:.4f} -> "
          f"{res.final_val['total']:.4f}")
    return 0


def cmd_train_smt(args) -> int:
    cfg = _train_config(args, "train_smt")
    _write_resolved(cfg.out_dir, "train_smt", _cfg_dict(cfg))
    res = train_smtnet(cfg)
    print(f"checkpoint: {res.checkpoint}")
    print(f"validation total: {res.init_val['total']:.4f} -> "
          f"{res.final_val['total']:.4f}")
    return 0


def _cfg_dict(cfg: TrainConfig) -> dict:
    d = dataclasses.asdict(cfg)
    d["weights"] = dataclasses.asdict(cfg.weights)
    return d


def cmd_infer(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for path in args.images:
        path = Path(path)
        if path.suffix.lower() == ".pfm":
            image = LinearImage(np.clip(image_io.read_pfm(path), 0, None))
        else:
            image = image_io.read_png(path, srgb=not args.no_srgb)
        texture = None
        if args.texture:
            texture = LinearImage(np.clip(image_io.read_pfm(args.texture), 0, None))
        decomp = infer(image, args.wb_ckpt, args.smt_ckpt, texture)
        dest = out / path.stem
        save_decomposition(decomp, dest, input_image=image)
        print(f"{path} -> {dest}")
    return 0


def save_decomposition(decomp: Decomposition, out_dir, input_image=None):
    """Persist a decomposition: PFMs, a JSON index and a preview strip."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {
        "wb_image": "wb_image.pfm",
        "wb_kernel": "wb_kernel.pfm",
        "material": "material.pfm",
        "shading_predicted": "shading_predicted.pfm",
        "reflectance": "reflectance.pfm",
    }
    image_io.write_pfm(out / files["wb_image"], decomp.wb_image.data)
    image_io.write_pfm(out / files["wb_kernel"], decomp.wb_kernel.data)
    image_io.write_pfm(out / files["material"], decomp.material.data)
    image_io.write_pfm(out / files["shading_predicted"],
                       decomp.shading_predicted.data)
    image_io.write_pfm(out / files["reflectance"], decomp.reflectance.data)
    if decomp.shading_estimated is not None:
        files["shading_estimated"] = "shading_estimated.pfm"
        image_io.write_pfm(out / files["shading_estimated"],
                           decomp.shading_estimated.data)
    panels = []
    if input_image is not None:
        panels.append(input_image.data)
    shade = decomp.shading_predicted.data
    shade3 = np.repeat(shade / max(float(shade.max()), 1.0), 3, axis=2)
    panels += [decomp.wb_image.data, decomp.material.data, shade3,
               decomp.reflectance.data]
    preview = np.concatenate(panels, axis=1)
    files["preview"] = "preview.png"
    image_io.write_png(out / files["preview"], preview, srgb=True)
    with open(out / "index.json", "w", encoding="utf-8") as f:
        json.dump(files, f, indent=2, sort_keys=True)
        f.write("\n")


def cmd_eval(args) -> int:
    body = _section(_load_config(args.config), "eval",
                    ["msssim_levels", "ld_block", "ld_search", "ocr_cmd"])
    levels = body.get("msssim_levels", 5)
    block = body.get("ld_block", 8)
    search = body.get("ld_search", 4)
    ocr_cmd = args.ocr_cmd or body.get("ocr_cmd")
    report = metrics.MetricReport()
    pairs = []
    if args.pairs:
        for spec in args.pairs:
            if ":" not in spec:
                raise UsageError(f"--pairs entries look like pred:ref, got {spec}")
            pred, ref = spec.split(":", 1)
            pairs.append((pred, ref, None))
    elif args.manifest:
        if not args.pred_dir:
            raise UsageError("--pred-dir is required with --manifest")
        base = Path(args.manifest).parent
        for rec in load_manifest(args.manifest):
            if rec["split"] != "val":
                continue
            pred = Path(args.pred_dir) / rec["id"] / "reflectance.pfm"
            pairs.append((pred, None, (rec, base)))
    else:
        raise UsageError("provide --pairs or --manifest")
    for pred_path, ref_path, rec_info in pairs:
        try:
            pred = image_io.read_pfm(pred_path)
        except DocshadeError as exc:
            print(f"skipping {pred_path}: {exc}", file=sys.stderr)
            continue
        if rec_info is not None:
            rec, base = rec_info
            from .synth import load_sample
            sample = load_sample(rec, base)
            ref = hadamard(sample.material_gt, sample.texture).data
            name = rec["id"]
        else:
            ref = image_io.read_pfm(ref_path)
            name = str(pred_path)
        row = {"name": name,
               "ms_ssim": metrics.ms_ssim(pred, ref, levels=levels),
               "local_distortion": metrics.local_distortion(
                   pred, ref, block=block, search=search)}
        if ocr_cmd:
            row.update(_ocr_row(pred, ref, ocr_cmd))
        report.per_sample.append(row)
    out = Path(args.out) if args.out else None
    payload = report.to_dict()
    if out:
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.json", "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
    print(report.render_table())
    return 0


def _ocr_row(pred: np.ndarray, ref: np.ndarray, ocr_cmd: str) -> dict:
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        ref_png = Path(tmp) / "ref.png"
        pred_png = Path(tmp) / "pred.png"
        image_io.write_png(ref_png, ref, srgb=True)
        image_io.write_png(pred_png, pred, srgb=True)
        ref_res = metrics.run_ocr(ref_png, ocr_cmd)
        pred_res = metrics.run_ocr(pred_png, ocr_cmd)
    if not (ref_res.ok and pred_res.ok):
        return {"ocr_status": ref_res.status if not ref_res.ok
                else pred_res.status}
    ref_text = ref_res.text.strip()
    if not ref_text:
        return {"ocr_status": "empty_reference"}
    return {"ocr_status": "ok",
            "cer": metrics.cer(ref_text, pred_res.text.strip()),
            "wer": metrics.wer(ref_text, pred_res.text.strip())}


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = selftest.gradient_suite(seed)
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


def cmd_selftest(args) -> int:
    seed = args.seed if args.seed is not None else 0
    results = (selftest.physics_suite(seed)
               + selftest.gradient_suite(seed)
               + selftest.oracle_suite(seed, n_samples=16))
    for r in results:
        print(r.line())
    return 0 if all(r.passed for r in results) else 1


# -- argument parsing -----------------------------------------------------------

def _add_common(p, out_required=True):
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--seed", type=int, help="master seed")
    p.add_argument("--out", required=out_required, help="output directory")
    p.add_argument("--threads", type=int,
                   help=f"worker cap (default: {THREADS_ENV} or cpu count)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="docshade",
        description="Document reflectance estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--samples", type=int, help="training sample count")
    p.add_argument("--val-samples", type=int, help="validation sample count")
    p.add_argument("--size", type=int, help="image side in pixels")
    p.add_argument("--textures", help="directory of texture images")
    p.set_defaults(fn=cmd_synth)

    for name, fn in (("train-wb", cmd_train_wb), ("train-smt", cmd_train_smt)):
        p = sub.add_parser(name, help=f"{name.replace('-', ' ')} stage")
        _add_common(p)
        p.add_argument("--manifest", help="dataset manifest")
        p.add_argument("--epochs", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--batch", type=int)
        if name == "train-smt":
            p.add_argument("--wb-ckpt",
                           help="stage-1 checkpoint (default: ground-truth "
                                "white-balanced inputs)")
        p.set_defaults(fn=fn)

    p = sub.add_parser("infer", help="decompose images")
    _add_common(p)
    p.add_argument("images", nargs="+", help="input PNG or PFM images")
    p.add_argument("--wb-ckpt", required=True)
    p.add_argument("--smt-ckpt", required=True)
    p.add_argument("--texture", help="known texture PFM (optional)")
    p.add_argument("--no-srgb", action="store_true",
                   help="treat PNG input as already linear")
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="compute metrics")
    _add_common(p, out_required=False)
    p.add_argument("--pairs", nargs="*", help="pred:ref image path pairs")
    p.add_argument("--manifest", help="dataset manifest")
    p.add_argument("--pred-dir", help="directory of per-sample predictions")
    p.add_argument("--ocr-cmd",
                   help="OCR command template with {input}, e.g. "
                        "'tesseract {input} stdout'")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="run the finite-difference suite")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("selftest", help="run identity and oracle suites")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_selftest)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DocshadeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
