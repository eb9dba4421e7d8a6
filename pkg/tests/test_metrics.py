import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from docshade.errors import (EmptyReference, ShapeMismatch, TooSmall,
                             ZeroVector)
from docshade.metrics import (MetricReport, angular_error, cer,
                              local_distortion, ms_ssim, run_ocr, wer)
from msssim_reference import constructed_pairs, reference_ms_ssim


def textured_image(rng, h, w):
    base = rng.uniform(0.2, 0.9, (h // 8 + 1, w // 8 + 1))
    img = np.kron(base, np.ones((8, 8)))[:h, :w]
    img += 0.05 * rng.standard_normal((h, w))
    return np.clip(img, 0.0, 1.0).astype(np.float32)


class TestMsSsim:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        img = textured_image(rng, 64, 64)
        assert ms_ssim(img, img, levels=3) == pytest.approx(1.0, abs=1e-6)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        a = textured_image(rng, 64, 64)
        b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1).astype(np.float32)
        assert ms_ssim(a, b, levels=3) == pytest.approx(
            ms_ssim(b, a, levels=3), abs=1e-6)

    def test_matches_independent_reference_on_constructed_pairs(self):
        rng = np.random.default_rng(2)
        for i, (a, b, levels) in enumerate(constructed_pairs(rng)):
            got = ms_ssim(a, b, levels=levels)
            want = reference_ms_ssim(a, b, levels)
            assert got == pytest.approx(want, abs=1e-3), f"pair {i}"

    def test_monotone_in_noise(self):
        rng = np.random.default_rng(3)
        img = textured_image(rng, 64, 64)
        scores = []
        for sigma in (0.0, 0.05, 0.1, 0.2):
            noisy = np.clip(img + sigma * rng.standard_normal(img.shape),
                            0, 1).astype(np.float32)
            scores.append(ms_ssim(img, noisy, levels=3))
        assert all(s1 >= s2 - 1e-9 for s1, s2 in zip(scores, scores[1:]))

    def test_small_image_falls_back_to_single_scale(self):
        rng = np.random.default_rng(4)
        img = textured_image(rng, 24, 24)
        noisy = np.clip(img + 0.05, 0, 1).astype(np.float32)
        assert ms_ssim(img, noisy, levels=5) == pytest.approx(
            ms_ssim(img, noisy, levels=1), abs=1e-9)

    def test_too_small(self):
        img = np.zeros((8, 8), dtype=np.float32)
        with pytest.raises(TooSmall):
            ms_ssim(img, img)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            ms_ssim(np.zeros((32, 32)), np.zeros((32, 33)))

    def test_range(self):
        rng = np.random.default_rng(5)
        a = textured_image(rng, 48, 48)
        b = 1.0 - a
        val = ms_ssim(a, b, levels=1)
        assert -1.0 <= val <= 1.0


class TestLocalDistortion:
    def test_identical_images(self):
        rng = np.random.default_rng(6)
        img = textured_image(rng, 64, 64)
        assert local_distortion(img, img) == 0.0

    def test_recovers_two_pixel_shift(self):
        rng = np.random.default_rng(7)
        img = textured_image(rng, 64, 64)
        shifted = np.roll(img, 2, axis=1)
        got = local_distortion(img, shifted, block=8, search=4)
        assert got == pytest.approx(2.0, abs=0.5)

    def test_brightness_scale_invariance(self):
        rng = np.random.default_rng(8)
        img = textured_image(rng, 64, 64)
        shifted = np.roll(img, 2, axis=1)
        a = local_distortion(img, shifted)
        b = local_distortion(img, (shifted * 1.2).astype(np.float32))
        assert a == pytest.approx(b, abs=1e-9)

    def test_too_small(self):
        with pytest.raises(TooSmall):
            local_distortion(np.zeros((10, 10)), np.zeros((10, 10)),
                             block=8, search=4)


def dp_edit_distance(a, b):
    """Quadratic DP table, the oracle for the production implementation."""
    n, m = len(a), len(b)
    table = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        table[i][0] = i
    for j in range(m + 1):
        table[0][j] = j
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(table[i - 1][j] + 1, table[i][j - 1] + 1,
                              table[i - 1][j - 1] + cost)
    return table[n][m]


class TestEditRates:
    def test_equal_strings(self):
        assert cer("shading", "shading") == 0.0
        assert wer("the quick fox", "the quick fox") == 0.0

    def test_single_substitution(self):
        assert cer("hello", "hallo") == pytest.approx(0.2)

    def test_empty_reference(self):
        with pytest.raises(EmptyReference):
            cer("", "anything")
        with pytest.raises(EmptyReference):
            wer("   ", "anything")

    def test_against_dp_oracle_100_random_pairs(self):
        rng = np.random.default_rng(9)
        alphabet = "abcde "
        for _ in range(100):
            n = int(rng.integers(1, 30))
            m = int(rng.integers(0, 30))
            ref = "".join(rng.choice(list(alphabet), n))
            hyp = "".join(rng.choice(list(alphabet), m))
            if not ref.strip("  "):
                ref = "a" + ref[1:]
            assert cer(ref, hyp) * len(ref) == pytest.approx(
                dp_edit_distance(ref, hyp))
            ref_tokens, hyp_tokens = ref.split(), hyp.split()
            if ref_tokens:
                assert wer(ref, hyp) * len(ref_tokens) == pytest.approx(
                    dp_edit_distance(ref_tokens, hyp_tokens))

    @settings(max_examples=60, deadline=None)
    @given(st.text(alphabet="abc", max_size=12),
           st.text(alphabet="abc", max_size=12))
    def test_zero_iff_equal(self, a, b):
        if not a:
            return
        rate = cer(a, b)
        assert (rate == 0.0) == (a == b)


class TestAngularError:
    def test_identical(self):
        assert angular_error([1, 2, 3], [1, 2, 3]) == pytest.approx(0.0)

    def test_orthogonal(self):
        assert angular_error([1, 0, 0], [0, 1, 0]) == pytest.approx(90.0)

    def test_45_degrees(self):
        assert angular_error([1, 1, 0], [1, 0, 0]) == pytest.approx(45.0)

    def test_symmetric_and_scale_invariant(self):
        rng = np.random.default_rng(10)
        a = rng.uniform(0.1, 1, 3)
        b = rng.uniform(0.1, 1, 3)
        assert angular_error(a, b) == pytest.approx(angular_error(b, a))
        assert angular_error(3.7 * a, b) == pytest.approx(
            angular_error(a, 0.2 * b))

    def test_zero_vector(self):
        with pytest.raises(ZeroVector):
            angular_error([0, 0, 0], [1, 0, 0])


class TestRunOcr:
    def test_template_requires_placeholder(self):
        with pytest.raises(ValueError):
            run_ocr("x.png", "tesseract stdout")

    def test_echo_command(self, tmp_path):
        img = tmp_path / "img.png"
        img.write_bytes(b"")
        res = run_ocr(img, "echo reading {input}")
        assert res.ok
        assert str(img) in res.text

    def test_missing_binary_is_unavailable(self):
        res = run_ocr("x.png", "definitely-not-a-real-ocr-binary {input}")
        assert res.status == "unavailable"
        assert not res.ok

    @pytest.mark.skipif(shutil.which("sleep") is None, reason="no sleep binary")
    def test_timeout(self):
        res = run_ocr("5", "sleep {input}", timeout=0.2)
        assert res.status == "timeout"

    def test_failing_command(self, tmp_path):
        script = tmp_path / "fail.sh"
        script.write_text("#!/bin/sh\nexit 3\n")
        script.chmod(0o755)
        res = run_ocr("x", f"{script} {{input}}")
        assert res.status == "failed"


class TestMetricReport:
    def test_aggregate_is_mean_of_rows(self):
        report = MetricReport()
        report.per_sample = [{"name": "a", "ms_ssim": 0.5, "ld": 2.0},
                             {"name": "b", "ms_ssim": 0.7, "ld": 4.0}]
        agg = report.aggregate()
        assert agg["ms_ssim"] == pytest.approx(0.6)
        assert agg["ld"] == pytest.approx(3.0)
        assert report.count == 2

    def test_render_table(self):
        report = MetricReport()
        report.per_sample = [{"name": "a", "cer": 0.25}]
        table = report.render_table()
        assert "cer" in table and "0.25" in table
