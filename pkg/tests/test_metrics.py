import math

import numpy as np
import pytest

from msholo.fields import ComplexField2D
from msholo.metrics import (
    eyebox_report,
    michelson_contrast,
    psnr,
    speckle_contrast,
    ssim,
    stack_report,
)
from msholo.targets import disk_blur
from conftest import random_field_array


class TestPsnr:
    def test_identical_is_inf(self, rng):
        img = rng.random((8, 8))
        assert psnr(img, img) == math.inf

    def test_uniform_error(self):
        ref = np.zeros((10, 10))
        img = np.full((10, 10), 0.1)
        assert psnr(img, ref, peak=1.0) == pytest.approx(20.0, abs=1e-12)

    def test_matches_formula_oracle(self, rng):
        a, b = rng.random((8, 8)), rng.random((8, 8))
        oracle = 10 * math.log10(b.max() ** 2 / np.mean((a - b) ** 2))
        assert psnr(a, b) == pytest.approx(oracle, rel=1e-12)

    def test_error_scaling_property(self, rng):
        ref = rng.random((16, 16))
        err = rng.standard_normal((16, 16)) * 0.01
        c = 3.7
        base = psnr(ref + err, ref, peak=1.0)
        scaled = psnr(ref + c * err, ref, peak=1.0)
        assert scaled == pytest.approx(base - 20 * math.log10(c), rel=1e-12)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValueError):
            psnr(rng.random((4, 4)), rng.random((5, 5)))


def ssim_loop_oracle(a, b, peak=1.0):
    """Direct per-window SSIM with the same Gaussian window."""
    taps, sigma = 11, 1.5
    x = np.arange(taps) - 5
    w1 = np.exp(-(x ** 2) / (2 * sigma ** 2))
    w = np.outer(w1, w1)
    w /= w.sum()
    c1, c2 = (0.01 * peak) ** 2, (0.03 * peak) ** 2
    h, wd = a.shape
    values = []
    for i in range(h - taps + 1):
        for j in range(wd - taps + 1):
            pa = a[i:i + taps, j:j + taps]
            pb = b[i:i + taps, j:j + taps]
            mu_a = np.sum(w * pa)
            mu_b = np.sum(w * pb)
            var_a = np.sum(w * pa * pa) - mu_a ** 2
            var_b = np.sum(w * pb * pb) - mu_b ** 2
            cov = np.sum(w * pa * pb) - mu_a * mu_b
            values.append(((2 * mu_a * mu_b + c1) * (2 * cov + c2))
                          / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)))
    return float(np.mean(values))


class TestSsim:
    def test_identical_is_one(self, rng):
        img = rng.random((16, 16))
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-12)

    def test_negative_for_inverted_binary(self):
        img = (np.indices((16, 16)).sum(axis=0) % 2).astype(float)
        assert ssim(1.0 - img, img) <= 0.0

    def test_matches_loop_oracle(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        assert ssim(a, b) == pytest.approx(ssim_loop_oracle(a, b), abs=1e-10)

    def test_scale_invariance_with_matched_peak(self, rng):
        a, b = rng.random((16, 16)), rng.random((16, 16))
        c = 4.2
        assert ssim(c * a, c * b, peak=c) == pytest.approx(ssim(a, b, peak=1.0), rel=1e-12)


class TestMichelson:
    def test_perfect_grating(self):
        img = np.zeros((16, 16))
        img[:, ::2] = 1.0
        assert michelson_contrast(img, region=(16, 16)) == 1.0

    def test_uniform_is_zero(self):
        assert michelson_contrast(np.full((16, 16), 0.7), region=(16, 16)) == 0.0

    def test_blurred_grating_oracle(self):
        img = np.zeros((32, 32))
        img[:, ::2] = 1.0
        blurred = disk_blur(img, 1.5)
        crop = blurred[8:24, 8:24]
        cells = crop.reshape(16, 8, 2)
        oracle = np.mean((cells.max(axis=2) - cells.min(axis=2))
                         / (cells.max(axis=2) + cells.min(axis=2)))
        assert michelson_contrast(blurred, region=(16, 16)) == pytest.approx(oracle, rel=1e-12)

    def test_scale_invariant(self, rng):
        img = rng.random((16, 16)) + 0.1
        assert michelson_contrast(3.0 * img, region=(16, 16)) == pytest.approx(
            michelson_contrast(img, region=(16, 16)), rel=1e-12)

    def test_region_out_of_bounds(self, rng):
        with pytest.raises(ValueError):
            michelson_contrast(rng.random((16, 16)), region=(32, 32))


class TestSpeckleContrast:
    def test_constant_is_zero(self):
        assert speckle_contrast(np.full((16, 16), 2.0)) == 0.0

    def test_fully_developed_speckle(self, rng):
        i = np.abs(random_field_array(rng, (128, 128))) ** 2
        assert speckle_contrast(i) == pytest.approx(1.0, abs=0.05)

    def test_n_average_law(self, rng):
        for n in (4, 16):
            stack = np.abs(random_field_array(rng, (n, 128, 128))) ** 2
            avg = stack.mean(axis=0)
            assert speckle_contrast(avg) == pytest.approx(1 / math.sqrt(n), rel=0.1)

    def test_windowed(self, rng):
        i = np.abs(random_field_array(rng, (64, 64))) ** 2
        value = speckle_contrast(i, window=16)
        assert 0.7 < value < 1.2

    def test_zero_mean_rejected(self):
        with pytest.raises(ValueError):
            speckle_contrast(np.zeros((8, 8)))

    def test_scale_invariant(self, rng):
        i = np.abs(random_field_array(rng, (32, 32))) ** 2
        assert speckle_contrast(5.0 * i) == pytest.approx(speckle_contrast(i), rel=1e-12)


class TestEyeboxReport:
    def test_plane_wave_peak_mean(self):
        h = w = 16
        field = ComplexField2D(np.ones((h, w), dtype=complex), 8e-6, 520e-9)
        report = eyebox_report([field])
        assert report.peak_mean_ratio == pytest.approx(h * w, rel=1e-9)

    def test_parseval(self, rng):
        field = ComplexField2D(random_field_array(rng, (16, 16)), 8e-6, 520e-9)
        report = eyebox_report([field])
        assert report.total_energy == pytest.approx(field.energy(), rel=1e-12)

    def test_log_image_range(self, rng):
        field = ComplexField2D(random_field_array(rng, (16, 16)), 8e-6, 520e-9)
        img = eyebox_report([field]).log_image()
        assert img.min() >= 0 and img.max() <= 1


class TestStackReport:
    def test_both_psnr_conventions_reported(self, rng):
        pred = [rng.random((8, 8)) for _ in range(3)]
        tgt = [rng.random((8, 8)) for _ in range(3)]
        report = stack_report(pred, tgt)
        assert len(report.psnr_planes) == 3
        assert np.isfinite(report.psnr_stack)
        assert report.psnr_plane_mean == pytest.approx(float(np.mean(report.psnr_planes)))
        rows = dict(report.rows())
        assert "psnr_stack_db" in rows and "psnr_plane_mean_db" in rows
