import numpy as np
import pytest

from msholo.fields import (
    ComplexField2D,
    FieldError,
    IntensityImage,
    SizeLimitError,
    block_mean,
    block_sum,
    fft2,
    freq_coords,
    ifft2,
    resample,
    shift_field,
    spatial_coords,
    ufft2,
    uifft2,
    upsample_array,
)
from conftest import random_field_array


def dft2_oracle(f):
    """Direct O(N^2) unitary DFT, independent of any FFT library."""
    h, w = f.shape
    ky, ny = np.meshgrid(np.arange(h), np.arange(h), indexing="ij")
    kx, nx = np.meshgrid(np.arange(w), np.arange(w), indexing="ij")
    wy = np.exp(-2j * np.pi * ky * ny / h) / np.sqrt(h)
    wx = np.exp(-2j * np.pi * kx * nx / w) / np.sqrt(w)
    return wy @ f @ wx.T


def make_field(data, pitch=8e-6, wavelength=520e-9):
    return ComplexField2D(data, pitch, wavelength)


class TestComplexField:
    def test_invariants(self):
        with pytest.raises(FieldError):
            make_field(np.ones((4, 4)), pitch=-1.0)
        with pytest.raises(FieldError):
            make_field(np.ones((4, 4)), wavelength=0.0)
        bad = np.ones((4, 4), dtype=complex)
        bad[0, 0] = np.nan
        with pytest.raises(FieldError):
            make_field(bad)

    def test_immutable(self):
        f = make_field(np.ones((4, 4), dtype=complex))
        with pytest.raises(ValueError):
            f.data[0, 0] = 2.0

    def test_intensity_nonnegative(self, rng):
        f = make_field(random_field_array(rng, (6, 6)))
        img = f.intensity()
        assert isinstance(img, IntensityImage)
        assert img.data.min() >= 0

    def test_intensity_rejects_negative(self):
        with pytest.raises(FieldError):
            IntensityImage(np.array([[-1.0, 0.0]]), 8e-6)


class TestGrids:
    def test_freq_layout_zero_at_index0(self):
        fy, fx = freq_coords((8, 6), 8e-6)
        assert fy[0] == 0 and fx[0] == 0
        assert fy[1] == pytest.approx(1 / (8 * 8e-6))

    def test_freq_reproducible(self):
        a = freq_coords((16, 16), 8e-6)
        b = freq_coords((16, 16), 8e-6)
        assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])

    def test_spatial_origin_on_grid(self):
        y, x = spatial_coords((8, 8), 8e-6)
        assert y[4] == 0.0 and x[4] == 0.0


class TestFft:
    def test_delta_flat_spectrum(self):
        h = w = 8
        f = np.zeros((h, w), dtype=complex)
        f[h // 2, w // 2] = 1.0
        spec = fft2(make_field(f))
        assert np.allclose(np.abs(spec.data), 1 / np.sqrt(h * w), atol=1e-14)

    def test_ones_to_dc(self):
        h = w = 8
        spec = fft2(make_field(np.ones((h, w), dtype=complex)))
        assert spec.data[0, 0] == pytest.approx(np.sqrt(h * w))
        off = spec.data.copy()
        off[0, 0] = 0
        assert np.max(np.abs(off)) < 1e-12

    def test_matches_direct_dft(self, rng):
        f = random_field_array(rng, (8, 8))
        assert np.max(np.abs(ufft2(f) - dft2_oracle(f))) < 1e-10 * np.abs(dft2_oracle(f)).max()

    @pytest.mark.parametrize("shape", [(1, 1), (2, 3), (4, 4), (5, 7), (16, 16)])
    def test_matches_direct_dft_all_small_sizes(self, rng, shape):
        f = random_field_array(rng, shape)
        assert np.max(np.abs(ufft2(f) - dft2_oracle(f))) < 1e-10

    def test_unitarity_and_parseval_f64(self, rng):
        f = random_field_array(rng, (32, 32))
        spec = ufft2(f)
        energy_in = np.sum(np.abs(f) ** 2)
        assert abs(np.sum(np.abs(spec) ** 2) - energy_in) <= 1e-12 * energy_in
        assert np.max(np.abs(uifft2(spec) - f)) <= 1e-12 * np.abs(f).max()

    def test_unitarity_f32(self, rng):
        f = random_field_array(rng, (32, 32), np.complex64)
        spec = ufft2(f)
        assert spec.dtype == np.complex64
        energy_in = float(np.sum(np.abs(f.astype(np.complex128)) ** 2))
        assert abs(float(np.sum(np.abs(spec.astype(np.complex128)) ** 2)) - energy_in) <= 1e-5 * energy_in

    def test_size_guard(self):
        big = np.zeros((1, 1))
        with pytest.raises(SizeLimitError):
            ufft2(np.broadcast_to(big, (1 << 14, 1 << 14)))


class TestResample:
    def test_up_constant(self):
        f = make_field(np.full((2, 2), 3 + 1j))
        up = resample(f, 2, "up")
        assert up.shape == (4, 4)
        assert up.pitch == pytest.approx(f.pitch / 2)
        assert np.all(up.data == 3 + 1j)

    def test_round_trip_exact_factor2(self, rng):
        f = make_field(random_field_array(rng, (6, 10)))
        back = resample(resample(f, 2, "up"), 2, "down")
        assert np.array_equal(back.data, f.data)
        assert back.pitch == pytest.approx(f.pitch)

    def test_round_trip_factor3(self, rng):
        # Averaging 9 copies rounds in the last bit, so equality is to ulp.
        f = make_field(random_field_array(rng, (6, 9)))
        back = resample(resample(f, 3, "up"), 3, "down")
        assert np.allclose(back.data, f.data, rtol=1e-15, atol=0)

    def test_down_is_block_mean(self, rng):
        data = random_field_array(rng, (4, 4))
        down = resample(make_field(data), 2, "down")
        for i in range(2):
            for j in range(2):
                block = data[2 * i:2 * i + 2, 2 * j:2 * j + 2]
                assert down.data[i, j] == pytest.approx(block.mean())

    def test_energy_preserved_up_down(self, rng):
        f = make_field(random_field_array(rng, (8, 8)))
        rt = resample(resample(f, 2, "up"), 2, "down")
        assert abs(rt.energy() - f.energy()) <= 1e-10 * f.energy()

    def test_down_requires_divisible(self, rng):
        with pytest.raises(FieldError):
            resample(make_field(random_field_array(rng, (5, 4))), 2, "down")

    def test_block_sum_is_upsample_adjoint(self, rng):
        x = rng.standard_normal((4, 4))
        y = rng.standard_normal((8, 8))
        lhs = np.sum(upsample_array(x, 2) * y)
        rhs = np.sum(x * block_sum(y, 2))
        assert lhs == pytest.approx(rhs)


class TestShift:
    def test_integer_shift_is_roll(self, rng):
        f = make_field(random_field_array(rng, (16, 16)))
        out = shift_field(f, (2 * f.pitch, -3 * f.pitch))
        assert np.allclose(out.data, np.roll(f.data, (2, -3), axis=(0, 1)), atol=1e-12)

    def test_zero_shift_identity(self, rng):
        f = make_field(random_field_array(rng, (8, 8)))
        assert np.allclose(shift_field(f, (0.0, 0.0)).data, f.data, atol=1e-14)
