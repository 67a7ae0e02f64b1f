import numpy as np
import pytest

from msholo.warp import (
    TpsWarp,
    bilinear_sample,
    check_foldover,
    control_grid,
    tps_apply,
    tps_apply_backward,
    tps_displacement,
)
from msholo.targets import demo_image
from conftest import random_field_array


SHAPE = (24, 24)


def grid_warp(disp):
    pts = control_grid(SHAPE, 4, 4)
    return TpsWarp(pts, disp)


def zero_warp():
    pts = control_grid(SHAPE, 4, 4)
    return TpsWarp(pts, np.zeros_like(pts))


class TestBasics:
    def test_zero_displacement_identity_bit_exact(self, rng):
        f = random_field_array(rng, SHAPE)
        assert np.array_equal(tps_apply(f, zero_warp()), f)

    def test_constant_translation(self, rng):
        img = rng.standard_normal(SHAPE)
        pts = control_grid(SHAPE, 4, 4)
        warp = TpsWarp(pts, np.tile([1.0, 0.0], (pts.shape[0], 1)))
        out = tps_apply(img, warp)
        assert np.allclose(out[:-1], img[1:], atol=1e-9)

    def test_displacement_field_linear_in_controls(self, rng):
        d1 = rng.uniform(-1, 1, (16, 2))
        d2 = rng.uniform(-1, 1, (16, 2))
        a = tps_displacement(grid_warp(d1), SHAPE)
        b = tps_displacement(grid_warp(d2), SHAPE)
        ab = tps_displacement(grid_warp(d1 + d2), SHAPE)
        assert np.allclose(ab, a + b, atol=1e-9)

    def test_interpolates_control_displacements(self, rng):
        # 22-pixel grid puts the 4x4 control points on integer pixels, so
        # the dense field can be read off exactly at the control locations.
        shape = (22, 22)
        pts = control_grid(shape, 4, 4)
        assert np.all(pts == np.round(pts))
        d = rng.uniform(-1, 1, (16, 2))
        disp = tps_displacement(TpsWarp(pts, d), shape)
        for (py, px), (dy, dx) in zip(pts, d):
            assert disp[0, int(py), int(px)] == pytest.approx(dy, abs=1e-9)
            assert disp[1, int(py), int(px)] == pytest.approx(dx, abs=1e-9)

    def test_bilinear_sample_exact_at_integers(self, rng):
        img = rng.standard_normal(SHAPE)
        ys, xs = np.mgrid[0:24, 0:24].astype(float)
        assert np.array_equal(bilinear_sample(img, ys, xs), img)

    def test_foldover_warning(self):
        pts = control_grid(SHAPE, 4, 4)
        disp = np.zeros_like(pts)
        disp[5] = (12.0, 12.0)
        with pytest.warns(RuntimeWarning):
            check_foldover(TpsWarp(pts, disp), SHAPE)


class TestGradients:
    def test_displacement_gradient_fd(self, rng):
        f = random_field_array(rng, SHAPE)
        target = rng.standard_normal(SHAPE)
        disp = rng.uniform(-0.7, 0.7, (16, 2))
        warp = grid_warp(disp)

        def loss(d):
            out = tps_apply(f, grid_warp(d))
            return float(np.sum((np.abs(out) ** 2 - target) ** 2))

        out = tps_apply(f, warp)
        cot = (2 * (np.abs(out) ** 2 - target)) * out
        _, g = tps_apply_backward(f, warp, cot)
        h = 1e-6
        for _ in range(8):
            k = rng.integers(0, 16)
            ax = rng.integers(0, 2)
            d = disp.copy()
            d[k, ax] += h
            lp = loss(d)
            d[k, ax] -= 2 * h
            lm = loss(d)
            fd = (lp - lm) / (2 * h)
            assert abs(g[k, ax] - fd) <= 1e-4 * max(abs(g[k, ax]), abs(fd), 1e-9)

    def test_field_cotangent_fd_real(self, rng):
        img = rng.standard_normal(SHAPE)
        target = rng.standard_normal(SHAPE)
        warp = grid_warp(rng.uniform(-0.5, 0.5, (16, 2)))

        out = tps_apply(img, warp)
        cot = 2 * (out - target)
        c_img, _ = tps_apply_backward(img, warp, cot)
        h = 1e-6
        for _ in range(6):
            i, j = rng.integers(0, 24, 2)
            p = img.copy()
            p[i, j] += h
            lp = float(np.sum((tps_apply(p, warp) - target) ** 2))
            p[i, j] -= 2 * h
            lm = float(np.sum((tps_apply(p, warp) - target) ** 2))
            fd = (lp - lm) / (2 * h)
            assert abs(c_img[i, j] - fd) <= 1e-5 * max(abs(c_img[i, j]), abs(fd), 1e-9)


class TestRecovery:
    def test_quadratic_warp_recovered(self, rng):
        # Fit control displacements to reproduce a known smooth warp of a
        # textured image; the displacement field must match to 0.1 px RMS.
        img = demo_image(SHAPE, seed=5)
        pts = control_grid(SHAPE, 4, 4)
        ny = pts[:, 0] / (SHAPE[0] - 1) - 0.5
        nx = pts[:, 1] / (SHAPE[1] - 1) - 0.5
        true_disp = np.stack([0.8 * (ny ** 2 + nx ** 2 - 0.25), 0.6 * ny * nx], axis=-1)
        oracle_warp = TpsWarp(pts, true_disp)
        observed = tps_apply(img, oracle_warp)

        disp = np.zeros_like(true_disp)
        m = np.zeros_like(disp)
        v = np.zeros_like(disp)
        for t in range(1, 301):
            warp = TpsWarp(pts, disp)
            out = tps_apply(img, warp)
            cot = 2 * (out - observed)
            _, g = tps_apply_backward(img, warp, cot)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            lr = 0.05 * (0.1 ** (t / 300))
            disp -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        err = tps_displacement(TpsWarp(pts, disp), SHAPE) - tps_displacement(oracle_warp, SHAPE)
        rms = float(np.sqrt(np.mean(np.sum(err ** 2, axis=0))))
        assert rms <= 0.1, rms
