import json
from pathlib import Path

import numpy as np
import pytest

from docshade import image_io
from docshade.cli import main
from docshade.imaging import LinearImage
from docshade.synth import SynthesisParams, gen_text_texture


def run_cli(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def cli_workspace(tmp_path_factory):
    """Dataset plus one trained checkpoint pair, shared across CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    ds = root / "ds"
    assert run_cli("synth", "--out", ds, "--seed", 13, "--size", 16,
                   "--samples", 10, "--val-samples", 4) == 0
    wb_dir, smt_dir = root / "wb", root / "smt"
    assert run_cli("train-wb", "--manifest", ds / "manifest.jsonl",
                   "--out", wb_dir, "--epochs", 1, "--batch", 4,
                   "--seed", 13) == 0
    assert run_cli("train-smt", "--manifest", ds / "manifest.jsonl",
                   "--out", smt_dir, "--epochs", 1, "--batch", 4,
                   "--seed", 13) == 0
    return {"root": root, "ds": ds, "wb": wb_dir / "wbnet.ckpt",
            "smt": smt_dir / "smtnet.ckpt"}


class TestSynthCommand:
    def test_deterministic_manifests(self, tmp_path):
        for name in ("a", "b"):
            assert run_cli("synth", "--out", tmp_path / name, "--seed", 3,
                           "--size", 16, "--samples", 3,
                           "--val-samples", 1) == 0
        m1 = (tmp_path / "a" / "manifest.jsonl").read_text()
        m2 = (tmp_path / "b" / "manifest.jsonl").read_text()
        assert m1 == m2

    def test_writes_resolved_config(self, tmp_path):
        assert run_cli("synth", "--out", tmp_path / "ds", "--seed", 1,
                       "--size", 16, "--samples", 2, "--val-samples", 1) == 0
        resolved = json.loads(
            (tmp_path / "ds" / "synth.resolved.json").read_text())
        assert resolved["params"]["seed"] == 1
        assert resolved["n_train"] == 2

    def test_config_file_with_flag_override(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps(
            {"synth": {"image_size": 16, "seed": 9, "n_train": 2,
                       "n_val": 1}}))
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "ds",
                       "--seed", 4) == 0
        resolved = json.loads(
            (tmp_path / "ds" / "synth.resolved.json").read_text())
        assert resolved["params"]["seed"] == 4  # flag wins

    def test_unknown_config_key_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"synth": {"imaginary_knob": 1}}))
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "ds") == 2

    def test_unknown_section_rejected(self, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"mystery": {}}))
        assert run_cli("synth", "--config", cfg, "--out", tmp_path / "ds") == 2


class TestTrainCommands:
    def test_missing_manifest_is_usage_error(self, tmp_path):
        assert run_cli("train-wb", "--out", tmp_path / "x") == 2

    def test_bad_manifest_path_fails(self, tmp_path):
        assert run_cli("train-wb", "--manifest", tmp_path / "nope.jsonl",
                       "--out", tmp_path / "x", "--epochs", 1) == 1


class TestInferCommand:
    def test_decomposition_outputs(self, cli_workspace, tmp_path):
        ds = cli_workspace["ds"]
        rec = json.loads(
            (ds / "manifest.jsonl").read_text().splitlines()[0])
        out = tmp_path / "dec"
        assert run_cli("infer", ds / rec["input"], "--wb-ckpt",
                       cli_workspace["wb"], "--smt-ckpt",
                       cli_workspace["smt"], "--texture", ds / rec["texture"],
                       "--out", out) == 0
        sample_dir = out / Path(rec["input"]).stem
        index = json.loads((sample_dir / "index.json").read_text())
        for key in ("wb_image", "wb_kernel", "material", "shading_predicted",
                    "reflectance", "shading_estimated", "preview"):
            assert key in index
            assert (sample_dir / index[key]).exists()

    def test_odd_sized_png_via_padding(self, cli_workspace, tmp_path):
        rng = np.random.default_rng(0)
        arr = rng.uniform(0.2, 0.9, (15, 11, 3)).astype(np.float32)
        png = tmp_path / "odd.png"
        image_io.write_png(png, arr, srgb=True)
        out = tmp_path / "odd_out"
        assert run_cli("infer", png, "--wb-ckpt", cli_workspace["wb"],
                       "--smt-ckpt", cli_workspace["smt"], "--out", out) == 0
        refl = image_io.read_pfm(out / "odd" / "reflectance.pfm")
        assert refl.shape == (15, 11, 3)

    def test_swapped_checkpoints_exit_one(self, cli_workspace, tmp_path):
        ds = cli_workspace["ds"]
        rec = json.loads(
            (ds / "manifest.jsonl").read_text().splitlines()[0])
        assert run_cli("infer", ds / rec["input"], "--wb-ckpt",
                       cli_workspace["smt"], "--smt-ckpt",
                       cli_workspace["wb"], "--out", tmp_path / "x") == 1


class TestEvalCommand:
    def test_pairs_mode(self, tmp_path):
        rng = np.random.default_rng(1)
        params = SynthesisParams(image_size=32, seed=2)
        a = gen_text_texture(rng, params).data
        b = np.clip(a + rng.uniform(-0.05, 0.05, a.shape), 0,
                    1).astype(np.float32)
        pa, pb = tmp_path / "a.pfm", tmp_path / "b.pfm"
        image_io.write_pfm(pa, a)
        image_io.write_pfm(pb, b)
        out = tmp_path / "report"
        assert run_cli("eval", "--pairs", f"{pa}:{pb}", "--out", out) == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["count"] == 1
        assert 0 <= payload["aggregate"]["ms_ssim"] <= 1

    def test_manifest_mode(self, cli_workspace, tmp_path):
        ds = cli_workspace["ds"]
        pred_dir = tmp_path / "preds"
        records = [json.loads(l)
                   for l in (ds / "manifest.jsonl").read_text().splitlines()]
        val = [r for r in records if r["split"] == "val"]
        for rec in val:
            sample_dir = pred_dir / rec["id"]
            sample_dir.mkdir(parents=True)
            image_io.write_pfm(sample_dir / "reflectance.pfm",
                               image_io.read_pfm(ds / rec["texture"]))
        out = tmp_path / "report"
        assert run_cli("eval", "--manifest", ds / "manifest.jsonl",
                       "--pred-dir", pred_dir, "--out", out) == 0
        payload = json.loads((out / "metrics.json").read_text())
        assert payload["count"] == len(val)

    def test_requires_input_source(self):
        assert run_cli("eval") == 2

    def test_bad_pair_spec(self):
        assert run_cli("eval", "--pairs", "no-colon-here") == 2


class TestVerificationCommands:
    def test_gradcheck_exits_zero(self):
        assert run_cli("gradcheck", "--seed", 0) == 0

    def test_selftest_exits_zero(self):
        assert run_cli("selftest", "--seed", 0) == 0


class TestThreadsEnv:
    def test_env_fallback(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DOCIIW_THREADS", "2")
        assert run_cli("synth", "--out", tmp_path / "ds", "--seed", 5,
                       "--size", 16, "--samples", 2, "--val-samples", 1) == 0
        resolved = json.loads(
            (tmp_path / "ds" / "synth.resolved.json").read_text())
        assert resolved["threads"] == 2

    def test_flag_beats_env(self, monkeypatch, tmp_path):
        monkeypatch.setenv("DOCIIW_THREADS", "2")
        assert run_cli("synth", "--out", tmp_path / "ds", "--seed", 5,
                       "--size", 16, "--samples", 2, "--val-samples", 1,
                       "--threads", 3) == 0
        resolved = json.loads(
            (tmp_path / "ds" / "synth.resolved.json").read_text())
        assert resolved["threads"] == 3
