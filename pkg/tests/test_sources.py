import numpy as np
import pytest

from msholo.fields import ComplexField2D, shift_field, ufft2, uifft2
from msholo.propagation import propagate
from msholo.sources import (
    GridSpec,
    SourceArray,
    count_in_memory_region,
    expected_shift,
    grid_spacing_from_geometry,
    make_grid,
    memory_effect_spacing,
    plane_wave,
    tilt_angle,
)
from conftest import random_field_array

PITCH = 8e-6
WL = 520e-9


class TestSourceArray:
    def test_requires_distinct_tilts(self):
        with pytest.raises(ValueError):
            SourceArray(np.zeros((2, 2)), np.full(2, 0.5))

    def test_requires_positive_total_intensity(self):
        with pytest.raises(ValueError):
            SourceArray(np.zeros((1, 2)), np.zeros(1))


class TestMakeGrid:
    def test_single_on_axis(self):
        src = make_grid(GridSpec(1, 1, 0.0))
        assert len(src) == 1
        assert np.all(src.tilts == 0)
        assert src.intensities[0] == 1.0

    def test_2x2_symmetry(self):
        src = make_grid(GridSpec(2, 2, 50e3))
        expected = {(-25e3, -25e3), (-25e3, 25e3), (25e3, -25e3), (25e3, 25e3)}
        assert {tuple(t) for t in src.tilts} == expected
        assert np.all(src.intensities == 0.25)

    def test_4x4_span(self):
        src = make_grid(GridSpec(4, 4, 50e3))
        coords = sorted(set(src.tilts[:, 0]))
        assert coords == pytest.approx([-75e3, -25e3, 25e3, 75e3])
        assert src.tilts.max() == pytest.approx(75e3)

    def test_closed_under_negation(self):
        src = make_grid(GridSpec(3, 4, 37e3))
        tilts = {tuple(np.round(t, 9)) for t in src.tilts}
        assert all(tuple(np.round(-np.asarray(t), 9)) in tilts for t in tilts)

    def test_zero_spacing_collapses(self):
        src = make_grid(GridSpec(4, 4, 0.0))
        assert len(src) == 1 and src.intensities[0] == 1.0


class TestPlaneWave:
    def test_zero_tilt_constant(self):
        f = plane_wave((0.0, 0.0), (8, 8), PITCH, WL)
        assert np.allclose(f.data, 1.0)

    def test_single_period(self):
        n = 16
        tilt = (0.0, 2 * np.pi / (n * PITCH))
        f = plane_wave(tilt, (n, n), PITCH, WL)
        spec = np.abs(ufft2(f.data))
        peak = np.unravel_index(np.argmax(spec), spec.shape)
        assert peak == (0, 1)
        assert spec[peak] == pytest.approx(n, rel=1e-12)

    def test_phase_zero_at_origin(self):
        f = plane_wave((12345.0, -2345.0), (9, 9), PITCH, WL)
        assert f.data[4, 4] == pytest.approx(1.0)

    def test_experimental_tilt_angle(self):
        # 79 rad/mm at 638 nm is 0.459 degrees incidence
        theta = tilt_angle((0.0, 79e3), 638e-9)
        assert np.rad2deg(theta) == pytest.approx(0.459, abs=2e-3)

    def test_paraxial_guard(self):
        big = 2 * np.pi * np.deg2rad(6.0) / WL
        with pytest.raises(ValueError):
            plane_wave((0.0, big), (8, 8), PITCH, WL)


class TestSpacingRule:
    def test_green_reference_value(self):
        value = memory_effect_spacing(8e-6, 520e-9, 2e-3)
        assert value * 1e-3 == pytest.approx(48.3, abs=0.1)
        assert value < 50e3

    def test_experimental_spacings(self):
        for wl, expect in ((638e-9, 79.0), (510e-9, 99.0), (455e-9, 110.0)):
            got = grid_spacing_from_geometry(4e-3, 500e-3, wl) * 1e-3
            assert got == pytest.approx(expect, abs=1.0)

    def test_doubling_gap_halves_threshold(self):
        a = memory_effect_spacing(PITCH, WL, 2e-3)
        b = memory_effect_spacing(PITCH, WL, 4e-3)
        assert a == pytest.approx(2 * b, rel=1e-15)

    def test_in_region_count(self):
        threshold = memory_effect_spacing(8e-6, 520e-9, 2e-3)
        assert count_in_memory_region(make_grid(GridSpec(4, 4, 50e3)), threshold) == 0
        assert count_in_memory_region(make_grid(GridSpec(4, 4, 20e3)), threshold) == 16
        assert count_in_memory_region(make_grid(GridSpec(1, 1, 0.0)), threshold) == 0


class TestExpectedShift:
    def test_zero_tilt(self):
        assert np.all(expected_shift((0.0, 0.0), WL, 10e-3) == 0)

    def test_reference_value(self):
        shift = expected_shift((0.0, 50e3), WL, 20e-3)
        assert shift[1] == pytest.approx(82.8e-6, rel=1e-3)
        assert shift[1] / PITCH == pytest.approx(10.3, abs=0.05)

    def test_threshold_shift_is_one_pixel(self):
        m = memory_effect_spacing(PITCH, WL, 2e-3)
        shift = expected_shift((0.0, m), WL, 2e-3)
        assert shift[1] == pytest.approx(PITCH, rel=1e-12)


class TestShiftEquivalence:
    @pytest.mark.parametrize("theta_deg,direction", [(0.2, (0.3, 0.95)), (0.45, (-0.6, 0.8)), (0.7, (0.37, 0.93))])
    def test_tilt_propagation_equals_shift(self, rng, theta_deg, direction):
        n, z = 128, 8e-3
        spec = np.zeros((n, n), dtype=complex)
        spec[:10, :10] = random_field_array(rng, (10, 10))
        hann = np.hanning(n)
        s = ComplexField2D(uifft2(spec) * np.sqrt(np.outer(hann, hann)), PITCH, WL)
        m = 2 * np.pi * np.deg2rad(theta_deg) / WL
        tilt = np.array(direction) * m
        shift = expected_shift(tilt, WL, z)
        assert np.linalg.norm(shift) / PITCH <= 16
        carrier = plane_wave(tilt, (n, n), PITCH, WL)
        a = propagate(s.with_data(s.data * carrier.data), z)
        b = shift_field(propagate(s, z), shift)
        b = b.with_data(b.data * carrier.data)
        ncc = abs(np.vdot(a.data, b.data)) / (np.linalg.norm(a.data) * np.linalg.norm(b.data))
        assert ncc >= 0.99
