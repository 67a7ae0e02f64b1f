"""Built-in oracle and property checks, runnable from the CLI.

These are quick desk checks of the load-bearing numerics (transform
unitarity, direct-DFT agreement, adjoint identities, the spacing rule,
gradient correctness, identity-model reduction); the pytest suite carries
the full acceptance criteria.
"""

from __future__ import annotations

import tempfile
from pathlib import Path

import numpy as np

from . import calibration as cal
from .fields import ComplexField2D, IntensityImage, shift_field, ufft2, uifft2
from .forward import SlmPattern, SystemConfig, forward_multisource_2slm
from .optimizer import OptimizeSpec, adam_step, gradients, init_adam
from .pipeline import evaluate_patterns
from .propagation import asm_kernel, propagate, propagate_adjoint
from .sources import GridSpec, expected_shift, grid_spacing_from_geometry, make_grid, memory_effect_spacing, plane_wave
from .targets import FocalStackTarget
from . import tensorio


def _dft_matrix(n: int) -> np.ndarray:
    k = np.arange(n)
    return np.exp(-2j * np.pi * np.outer(k, k) / n) / np.sqrt(n)


def check_fft_unitarity(rng):
    f = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    spec = ufft2(f)
    assert abs(np.sum(np.abs(spec) ** 2) - np.sum(np.abs(f) ** 2)) <= 1e-12 * np.sum(np.abs(f) ** 2)
    assert np.max(np.abs(uifft2(spec) - f)) <= 1e-12


def check_fft_matches_dft(rng):
    f = rng.standard_normal((8, 8)) + 1j * rng.standard_normal((8, 8))
    oracle = _dft_matrix(8) @ f @ _dft_matrix(8).T
    assert np.max(np.abs(ufft2(f) - oracle)) <= 1e-10


def check_propagation(rng):
    field = ComplexField2D(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)),
                           8e-6, 520e-9)
    back = propagate(propagate(field, 2e-3), -2e-3)
    filtered = propagate(field, 0.0)
    assert np.max(np.abs(back.data - filtered.data)) <= 1e-10
    a = ComplexField2D(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)), 8e-6, 520e-9)
    b = ComplexField2D(rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16)), 8e-6, 520e-9)
    lhs = np.vdot(propagate(a, 3e-3).data, b.data)
    rhs = np.vdot(a.data, propagate_adjoint(b, 3e-3).data)
    assert abs(lhs - rhs) <= 1e-10 * max(abs(lhs), 1.0)


def check_spacing_rule(_rng):
    assert abs(memory_effect_spacing(8e-6, 520e-9, 2e-3) - 48332.2) <= 100.0
    for wl, expect in ((638e-9, 79.0), (510e-9, 99.0), (455e-9, 110.0)):
        got = grid_spacing_from_geometry(4e-3, 500e-3, wl) * 1e-3
        assert abs(got - expect) <= 1.0, (got, expect)


def check_shift_equivalence(rng):
    # Windowed (finite) beam keeps the non-periodic carrier off the DFT
    # wrap seam; the equivalence then holds for arbitrary tilts.
    n, pitch, wl, z = 64, 8e-6, 520e-9, 5e-3
    spec = np.zeros((n, n), dtype=complex)
    spec[:6, :6] = rng.standard_normal((6, 6)) + 1j * rng.standard_normal((6, 6))
    hann = np.hanning(n)
    s = ComplexField2D(uifft2(spec) * np.sqrt(np.outer(hann, hann)), pitch, wl)
    m = 2 * np.pi * np.deg2rad(0.5) / wl
    tilt = np.array([0.31 * m, 0.88 * m])
    carrier = plane_wave(tilt, (n, n), pitch, wl)
    a = propagate(s.with_data(s.data * carrier.data), z)
    b = shift_field(propagate(s, z), expected_shift(tilt, wl, z))
    b = b.with_data(b.data * carrier.data)
    ncc = abs(np.vdot(a.data, b.data)) / (np.linalg.norm(a.data) * np.linalg.norm(b.data))
    assert ncc >= 0.99, ncc


def check_tensor_roundtrip(rng):
    t = (rng.standard_normal((3, 5)) + 1j * rng.standard_normal((3, 5))).astype(np.complex128)
    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "t.tnsr"
        tensorio.write_tensor(path, t)
        assert np.array_equal(tensorio.read_tensor(path), t)


def check_gradients(rng):
    cfg = SystemConfig(pitch=8e-6, gap=2e-3, wavelengths=(520e-9,), planes=(20e-3,), upsample=1)
    sources = make_grid(GridSpec(2, 1, 60000.0))
    s1 = SlmPattern("phase", cfg.pitch, phase=rng.uniform(-np.pi, np.pi, (8, 8)))
    s2 = SlmPattern("amplitude", cfg.pitch, amplitude=rng.uniform(0.2, 0.8, (8, 8)))
    target = FocalStackTarget((20e-3,), (IntensityImage(rng.uniform(0, 1, (8, 8)), cfg.pitch),))
    _, g = gradients(s1, s2, sources, cfg, target)
    h = 1e-6
    for _ in range(4):
        i, j = rng.integers(0, 8, 2)
        phase = np.array(s1.phase)
        phase[i, j] += h
        lp = evaluate_patterns([(SlmPattern("phase", cfg.pitch, phase=phase), s2)], sources,
                               cfg, target.stack_array(), want_grads=False).loss
        phase[i, j] -= 2 * h
        lm = evaluate_patterns([(SlmPattern("phase", cfg.pitch, phase=phase), s2)], sources,
                               cfg, target.stack_array(), want_grads=False).loss
        fd = (lp - lm) / (2 * h)
        an = g["s1.phase"][i, j]
        assert abs(an - fd) <= 1e-4 * max(abs(an), abs(fd), 1e-9), (an, fd)


def check_identity_reduction(rng):
    cfg = SystemConfig(pitch=8e-6, gap=2e-3, wavelengths=(520e-9,), planes=(20e-3,), upsample=2)
    sources = make_grid(GridSpec(2, 2, 60000.0))
    model = cal.identity_model(sources, (12, 12), pupil_spatial=(2, 2), pupil_freq=(3, 3),
                               warp_ctrl=(3, 3), upsample=2)
    d1 = rng.integers(0, 256, (12, 12)).astype(float)
    d2 = rng.integers(0, 256, (12, 12)).astype(float)
    pred = cal.calibrated_forward(model, d1, d2, "multi", 20e-3, cfg)
    s1 = SlmPattern("phase", cfg.pitch, phase=cal.apply_lut(d1, cal.identity_lut()))
    s2 = SlmPattern("phase", cfg.pitch, phase=cal.apply_lut(d2, cal.identity_lut()))
    ideal = forward_multisource_2slm(s1, s2, sources, cfg, 20e-3)
    assert np.max(np.abs(pred - ideal.data)) <= 1e-12 * ideal.data.max()


def check_speckle_law(rng):
    n = 4
    stack = np.abs(rng.standard_normal((n, 256, 256)) + 1j * rng.standard_normal((n, 256, 256))) ** 2
    avg = stack.mean(axis=0)
    contrast = avg.std() / avg.mean()
    assert abs(contrast - 1 / np.sqrt(n)) <= 0.1 / np.sqrt(n)


def check_adam_first_step(_rng):
    spec = OptimizeSpec(iterations=1, step_size=0.05)
    params = {"x": np.array([1.0, -2.0])}
    grads = {"x": np.array([0.3, -0.7])}
    state = init_adam(params)
    new, _ = adam_step(params, grads, state, spec)
    step = new["x"] - params["x"]
    assert np.allclose(np.abs(step), spec.step_size, rtol=1e-6)
    assert np.all(np.sign(step) == -np.sign(grads["x"]))


CHECKS = (
    ("fft-unitarity", check_fft_unitarity),
    ("fft-matches-dft", check_fft_matches_dft),
    ("propagation-inverse-adjoint", check_propagation),
    ("spacing-rule-values", check_spacing_rule),
    ("shift-equivalence", check_shift_equivalence),
    ("tensorfile-roundtrip", check_tensor_roundtrip),
    ("gradient-finite-difference", check_gradients),
    ("identity-model-reduction", check_identity_reduction),
    ("speckle-averaging-law", check_speckle_law),
    ("adam-first-step", check_adam_first_step),
)


def run(verbose: bool = False) -> int:
    failures = 0
    for name, check in CHECKS:
        rng = np.random.default_rng(123)
        try:
            check(rng)
            if verbose:
                print(f"ok   {name}")
        except AssertionError as exc:
            failures += 1
            print(f"FAIL {name}: {exc}")
    if verbose:
        print(f"{len(CHECKS) - failures}/{len(CHECKS)} checks passed")
    return 0 if failures == 0 else 1
