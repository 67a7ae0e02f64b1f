"""Learnable system model and staged calibration against a synthetic oracle.

The model maps digital SLM values to a captured intensity through a chain
of physically meaningful parameters: per-SLM lookup tables, sub-pixel
fringing kernels on the upsampled phase, spatially varying complex pupil
functions attached to both propagation legs, thin-plate-spline warps for
SLM-to-SLM and model-to-camera alignment, and per-source frequency
locations with field amplitudes. An identity-initialized model reproduces
the ideal two-SLM forward model; every parameter has a hand-derived
adjoint so the same code serves offline fitting and camera-in-the-loop
pattern fine-tuning (with a synthetic capture oracle standing in for the
camera).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.ndimage import gaussian_filter

from .fields import block_mean, block_sum, spatial_coords, ufft2, uifft2, upsample_array
from .forward import SystemConfig
from .propagation import asm_kernel
from .sources import SourceArray, plane_wave_stack
from .warp import TpsWarp, control_grid, tps_apply, tps_apply_backward, tps_displacement
from . import tensorio

__all__ = [
    "CalibModel",
    "CaptureRecord",
    "CaptureDataset",
    "identity_model",
    "apply_lut",
    "apply_fringing",
    "apply_pupil_grid",
    "interp_pupil",
    "calibrated_forward",
    "render_capture",
    "make_synthetic_dataset",
    "FitSpec",
    "fit_model",
    "CitlSpec",
    "active_citl",
    "perturbed_model",
    "PRESETS",
    "lut_rms_error",
    "source_bin_error",
    "warp_rms_error",
    "save_model",
    "load_model",
]

LUT_SIZE = 256
DEFAULT_STAGES = ("warp", "single", "source", "finetune")


# ---------------------------------------------------------------------------
# model container


@dataclass(frozen=True)
class CalibModel:
    """Learnable system parameters; see the module docstring for the chain."""

    lut1: np.ndarray
    lut2: np.ndarray
    fringe1: np.ndarray
    fringe2: np.ndarray
    pupil1: np.ndarray
    pupil2: np.ndarray
    warp_slm: TpsWarp
    warp_cam: TpsWarp
    source_tilts: np.ndarray
    source_amps: np.ndarray
    single_tilt: np.ndarray = field(default_factory=lambda: np.zeros((1, 2)))

    def __post_init__(self):
        for name in ("lut1", "lut2"):
            lut = np.array(getattr(self, name), dtype=np.float64)
            if lut.shape != (LUT_SIZE,) or not np.all(np.isfinite(lut)):
                raise ValueError(f"{name} must be {LUT_SIZE} finite values")
            object.__setattr__(self, name, lut)
        for name in ("fringe1", "fringe2"):
            k = np.array(getattr(self, name), dtype=np.float64)
            if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] % 2 == 0:
                raise ValueError(f"{name} must be an odd square kernel")
            object.__setattr__(self, name, k)
        for name in ("pupil1", "pupil2"):
            p = np.array(getattr(self, name), dtype=np.complex128)
            if p.ndim != 4:
                raise ValueError(f"{name} must be (Gy, Gx, Ky, Kx) complex")
            object.__setattr__(self, name, p)
        tilts = np.atleast_2d(np.array(self.source_tilts, dtype=np.float64))
        amps = np.atleast_1d(np.array(self.source_amps, dtype=np.float64))
        if amps.shape != (tilts.shape[0],) or np.any(amps < 0):
            raise ValueError("one nonnegative amplitude per source required")
        object.__setattr__(self, "source_tilts", tilts)
        object.__setattr__(self, "source_amps", amps)
        object.__setattr__(self, "single_tilt", np.atleast_2d(np.array(self.single_tilt, dtype=np.float64)))

    def sources_for(self, source_set: str):
        if source_set == "multi":
            return self.source_tilts, self.source_amps
        if source_set == "single":
            return self.single_tilt, np.ones(1)
        raise ValueError(f"unknown source set {source_set!r}")

    def has_unit_pupils(self) -> bool:
        return bool(np.all(self.pupil1 == 1.0) and np.all(self.pupil2 == 1.0))


def identity_lut() -> np.ndarray:
    return np.arange(LUT_SIZE, dtype=np.float64) * (2.0 * np.pi / LUT_SIZE)


def delta_kernel(size: int = 5) -> np.ndarray:
    k = np.zeros((size, size))
    k[size // 2, size // 2] = 1.0
    return k


def identity_model(sources: SourceArray, shape, pupil_spatial=(3, 4), pupil_freq=(6, 6),
                   fringe_size: int = 5, warp_ctrl=(4, 4), upsample: int = 2) -> CalibModel:
    """Model whose output matches the ideal two-SLM forward model exactly.

    `shape` is the SLM grid; warp control points live on the upsampled grid
    for the SLM leg and on the capture grid for the camera leg.
    """
    shape_up = (shape[0] * upsample, shape[1] * upsample)
    pts_slm = control_grid(shape_up, *warp_ctrl)
    pts_cam = control_grid(shape, *warp_ctrl)
    pupil = np.ones(tuple(pupil_spatial) + tuple(pupil_freq), dtype=np.complex128)
    return CalibModel(
        lut1=identity_lut(),
        lut2=identity_lut(),
        fringe1=delta_kernel(fringe_size),
        fringe2=delta_kernel(fringe_size),
        pupil1=pupil.copy(),
        pupil2=pupil.copy(),
        warp_slm=TpsWarp(pts_slm, np.zeros_like(pts_slm)),
        warp_cam=TpsWarp(pts_cam, np.zeros_like(pts_cam)),
        source_tilts=sources.tilts.copy(),
        source_amps=np.sqrt(sources.intensities),
    )


# ---------------------------------------------------------------------------
# differentiable components


def apply_lut(digital: np.ndarray, lut: np.ndarray) -> np.ndarray:
    """Digital values in [0, 255] to phase via 1D linear interpolation."""
    d = np.asarray(digital, dtype=np.float64)
    if d.min() < 0 or d.max() > LUT_SIZE - 1:
        raise ValueError(f"digital values must lie in [0, {LUT_SIZE - 1}]")
    k = np.clip(np.floor(d).astype(np.intp), 0, LUT_SIZE - 2)
    t = d - k
    return (1.0 - t) * lut[k] + t * lut[k + 1]


def _lut_backward(digital, lut, cot):
    d = np.asarray(digital, dtype=np.float64)
    k = np.clip(np.floor(d).astype(np.intp), 0, LUT_SIZE - 2)
    t = d - k
    g_lut = np.zeros(LUT_SIZE)
    np.add.at(g_lut, k.ravel(), ((1.0 - t) * cot).ravel())
    np.add.at(g_lut, (k + 1).ravel(), (t * cot).ravel())
    g_digital = (lut[k + 1] - lut[k]) * cot
    return g_lut, g_digital


def _pad_replicate_indices(shape, r):
    iy = np.clip(np.arange(-r, shape[0] + r), 0, shape[0] - 1)
    ix = np.clip(np.arange(-r, shape[1] + r), 0, shape[1] - 1)
    return iy, ix


def apply_fringing(phase: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Cross-correlate the phase with the fringing kernel (replicate border).

    A centered delta kernel is the identity.
    """
    r = kernel.shape[0] // 2
    iy, ix = _pad_replicate_indices(phase.shape, r)
    padded = phase[np.ix_(iy, ix)]
    out = np.zeros_like(phase)
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            out += kernel[a, b] * padded[a:a + phase.shape[0], b:b + phase.shape[1]]
    return out


def _pad_replicate_adjoint(c_padded, r, shape):
    h, w = shape
    mid = c_padded[r:r + h].copy()
    mid[0] += c_padded[:r].sum(axis=0)
    mid[-1] += c_padded[r + h:].sum(axis=0)
    out = mid[:, r:r + w].copy()
    out[:, 0] += mid[:, :r].sum(axis=1)
    out[:, -1] += mid[:, r + w:].sum(axis=1)
    return out


def _fringing_backward(phase, kernel, cot):
    r = kernel.shape[0] // 2
    h, w = phase.shape
    iy, ix = _pad_replicate_indices(phase.shape, r)
    padded = phase[np.ix_(iy, ix)]
    g_kernel = np.zeros_like(kernel)
    c_padded = np.zeros_like(padded)
    for a in range(kernel.shape[0]):
        for b in range(kernel.shape[1]):
            window = padded[a:a + h, b:b + w]
            g_kernel[a, b] = float(np.sum(window * cot))
            c_padded[a:a + h, b:b + w] += kernel[a, b] * cot
    return g_kernel, _pad_replicate_adjoint(c_padded, r, phase.shape)


def _axis_weights(n_out: int, n_in: int) -> np.ndarray:
    """Dense (n_out, n_in) bilinear interpolation weights, corner aligned."""
    w = np.zeros((n_out, n_in))
    if n_in == 1:
        w[:, 0] = 1.0
        return w
    pos = np.arange(n_out) * (n_in - 1) / (n_out - 1) if n_out > 1 else np.zeros(1)
    i0 = np.clip(np.floor(pos).astype(np.intp), 0, n_in - 2)
    t = pos - i0
    w[np.arange(n_out), i0] = 1.0 - t
    w[np.arange(n_out), i0 + 1] += t
    return w


_pupil_interp_cache: dict = {}


def _pupil_tables(shape, freq_shape):
    key = (tuple(shape), tuple(freq_shape))
    hit = _pupil_interp_cache.get(key)
    if hit is None:
        hit = (_axis_weights(shape[0], freq_shape[0]), _axis_weights(shape[1], freq_shape[1]))
        _pupil_interp_cache[key] = hit
    return hit


def _spatial_weights(grid_shape, center):
    """Bilinear weights over the (Gy, Gx) node grid for a normalized center."""
    gy, gx = grid_shape
    py = float(center[0]) * (gy - 1)
    px = float(center[1]) * (gx - 1)
    if not (0.0 <= py <= gy - 1 and 0.0 <= px <= gx - 1):
        raise ValueError("patch center outside the pupil grid domain")
    i0 = min(int(np.floor(py)), max(gy - 2, 0))
    j0 = min(int(np.floor(px)), max(gx - 2, 0))
    ty = py - i0 if gy > 1 else 0.0
    tx = px - j0 if gx > 1 else 0.0
    weights = []
    for dy, wy in ((0, 1 - ty), (1, ty)):
        for dx, wx in ((0, 1 - tx), (1, tx)):
            if wy * wx != 0.0 and i0 + dy < gy and j0 + dx < gx:
                weights.append((i0 + dy, j0 + dx, wy * wx))
    return weights


def interp_pupil(pupil_grid: np.ndarray, center, shape) -> np.ndarray:
    """Pupil for a normalized (cy, cx) patch center, upsampled onto the full
    frequency grid (standard DFT layout)."""
    weights = _spatial_weights(pupil_grid.shape[:2], center)
    coarse = sum(w * pupil_grid[i, j] for i, j, w in weights)
    wy, wx = _pupil_tables(shape, pupil_grid.shape[2:])
    centered = wy @ coarse @ wx.T
    return np.fft.ifftshift(centered)


def _pupil_backward(pupil_grid, center, shape, c_q):
    """Adjoint of interp_pupil: complex gradient (2 * cotangent convention)
    scattered back onto the node grid."""
    wy, wx = _pupil_tables(shape, pupil_grid.shape[2:])
    c_centered = np.fft.fftshift(c_q)
    c_coarse = wy.T @ c_centered @ wx
    g = np.zeros_like(pupil_grid)
    for i, j, w in _spatial_weights(pupil_grid.shape[:2], center):
        g[i, j] += w * c_coarse
    return g


def apply_pupil_grid(spectrum: np.ndarray, pupil_grid: np.ndarray, patch_center) -> np.ndarray:
    """Multiply a spectrum by the interpolated pupil for a patch center."""
    return spectrum * interp_pupil(pupil_grid, patch_center, spectrum.shape[-2:])


def patch_cells(grid_shape, shape):
    """Nearest-node partition of an image into (Gy * Gx) rectangular cells.

    Returns a list of (center, slice_y, slice_x) with normalized centers.
    """
    gy, gx = grid_shape
    edges_y = [int(round((i - 0.5) * (shape[0] - 1) / max(gy - 1, 1))) if i > 0 else 0 for i in range(gy)] + [shape[0]]
    edges_x = [int(round((j - 0.5) * (shape[1] - 1) / max(gx - 1, 1))) if j > 0 else 0 for j in range(gx)] + [shape[1]]
    edges_y = [max(0, min(shape[0], e)) for e in edges_y]
    edges_x = [max(0, min(shape[1], e)) for e in edges_x]
    cells = []
    for i in range(gy):
        cy = i / max(gy - 1, 1)
        for j in range(gx):
            cx = j / max(gx - 1, 1)
            cells.append(((cy, cx), slice(edges_y[i], edges_y[i + 1]), slice(edges_x[j], edges_x[j + 1])))
    return cells


# ---------------------------------------------------------------------------
# forward chain


class _Tape:
    """Saved intermediates of one calibrated forward evaluation."""

    __slots__ = ("d1", "d2", "phi1", "phi2", "phi1u", "phi2u", "s1", "s2", "illum",
                 "unit_illum", "f1", "spec1", "q1", "f2", "f2w", "f3", "spec2", "q2",
                 "g", "intensity", "pred", "kernels", "coords", "center", "z",
                 "source_set", "wavelength", "band_limit")


def _slm_stage(digital, lut, fringe, upsample):
    phi = apply_lut(digital, lut)
    phiu = upsample_array(phi, upsample)
    phif = apply_fringing(phiu, fringe)
    return np.exp(1j * phif), phiu


def _slm_stage_backward(tape_phiu, digital, lut, fringe, s, c_s, upsample):
    dphi_f = 2.0 * np.imag(np.conj(s) * c_s)
    g_fringe, c_phiu = _fringing_backward(tape_phiu, fringe, dphi_f)
    c_phi = block_sum(c_phiu, upsample)
    g_lut, g_digital = _lut_backward(digital, lut, c_phi)
    return g_lut, g_fringe, g_digital


def calibrated_forward(model: CalibModel, d1, d2, source_set: str, z: float,
                       config: SystemConfig, wavelength=None, band_limit="none",
                       pupil_mode="auto", patch_center=(0.5, 0.5),
                       _tape: bool = False):
    """Capture-space intensity predicted by the calibrated model.

    pupil_mode 'auto' skips pupil multiplication for unit grids, applies
    the dense spatially varying evaluation otherwise; 'patch' uses the
    single interpolated pupil at patch_center; 'none' forces unit pupils.
    """
    wavelength = config.wavelengths[0] if wavelength is None else wavelength
    if pupil_mode == "auto":
        pupil_mode = "none" if model.has_unit_pupils() else "dense"
    if pupil_mode == "dense":
        if _tape:
            raise ValueError("dense pupil mode is forward-only; fit with 'patch'")
        cells = patch_cells(model.pupil1.shape[:2], np.asarray(d1).shape)
        out = np.zeros(np.asarray(d1).shape)
        for center, sy, sx in cells:
            part = calibrated_forward(model, d1, d2, source_set, z, config, wavelength,
                                      band_limit, "patch", center)
            out[sy, sx] = part[sy, sx]
        return out
    if pupil_mode not in ("none", "patch"):
        raise ValueError(f"unknown pupil_mode {pupil_mode!r}")

    up = config.upsample
    t = _Tape()
    t.d1, t.d2 = np.asarray(d1, dtype=np.float64), np.asarray(d2, dtype=np.float64)
    t.z, t.source_set, t.wavelength, t.band_limit = z, source_set, wavelength, band_limit
    t.center = patch_center
    shape_up = (t.d1.shape[0] * up, t.d1.shape[1] * up)
    pitch = config.sim_pitch

    t.s1, t.phi1u = _slm_stage(t.d1, model.lut1, model.fringe1, up)
    t.s2, t.phi2u = _slm_stage(t.d2, model.lut2, model.fringe2, up)

    tilts, amps = model.sources_for(source_set)
    t.unit_illum = plane_wave_stack(tilts, shape_up, pitch, wavelength)
    t.illum = amps[:, None, None] * t.unit_illum
    t.f1 = t.illum * t.s1[None]

    k_gap = asm_kernel(shape_up, pitch, wavelength, config.require_gap(), band_limit)
    k_z = asm_kernel(shape_up, pitch, wavelength, z, band_limit)
    t.kernels = (k_gap, k_z)
    t.q1 = t.q2 = None
    if pupil_mode == "patch":
        t.q1 = interp_pupil(model.pupil1, patch_center, shape_up)
        t.q2 = interp_pupil(model.pupil2, patch_center, shape_up)

    t.spec1 = ufft2(t.f1)
    h1 = k_gap.transfer if t.q1 is None else k_gap.transfer * t.q1
    t.f2 = uifft2(t.spec1 * h1)
    if model.warp_slm.is_identity:
        t.f2w = t.f2
    else:
        t.f2w = np.stack([tps_apply(t.f2[i], model.warp_slm) for i in range(t.f2.shape[0])])
    t.f3 = t.f2w * t.s2[None]
    t.spec2 = ufft2(t.f3)
    h2 = k_z.transfer if t.q2 is None else k_z.transfer * t.q2
    t.g = uifft2(t.spec2 * h2)
    per = t.g.real ** 2 + t.g.imag ** 2
    t.intensity = block_mean(per.sum(axis=0), up)
    if model.warp_cam.is_identity:
        t.pred = t.intensity
    else:
        t.pred = tps_apply(t.intensity, model.warp_cam)
    return (t.pred, t) if _tape else t.pred


def _calibrated_backward(model: CalibModel, t: _Tape, config: SystemConfig, delta,
                         wrt=("model",)):
    """Reverse pass from a real capture-space cotangent `delta`.

    Returns a gradient dict; complex pupil gradients use the stored complex
    convention g = dL/dRe + j dL/dIm.
    """
    up = config.upsample
    k_gap, k_z = t.kernels
    grads = {}
    want_model = "model" in wrt
    want_patterns = "patterns" in wrt

    if model.warp_cam.is_identity and not want_model:
        c_int = delta
    else:
        # At the identity the sampling sits on the bilinear kinks; the
        # one-sided derivative is still a valid descent direction and the
        # first step moves the fit onto smooth ground.
        c_int, g_wc = tps_apply_backward(t.intensity, model.warp_cam, delta)
        if want_model:
            grads["warp_cam"] = g_wc
    c_per = upsample_array(c_int, up) / (up * up)
    c_g = c_per[None] * t.g

    c_spec2_h = ufft2(c_g)
    h2 = k_z.transfer if t.q2 is None else k_z.transfer * t.q2
    c_spec2 = np.conj(h2) * c_spec2_h
    if want_model and t.q2 is not None:
        c_q2 = np.sum(np.conj(t.spec2 * k_z.transfer) * c_spec2_h, axis=0)
        grads["pupil2"] = 2.0 * _pupil_backward(model.pupil2, t.center, c_q2.shape, c_q2)
    c_f3 = uifft2(c_spec2)

    c_f2w = np.conj(t.s2)[None] * c_f3
    c_s2 = np.sum(np.conj(t.f2w) * c_f3, axis=0)
    if model.warp_slm.is_identity and not want_model:
        c_f2 = c_f2w
    else:
        parts = [tps_apply_backward(t.f2[i], model.warp_slm, c_f2w[i]) for i in range(t.f2.shape[0])]
        c_f2 = np.stack([p[0] for p in parts])
        if want_model:
            grads["warp_slm"] = np.sum([p[1] for p in parts], axis=0)

    c_spec1_h = ufft2(c_f2)
    h1 = k_gap.transfer if t.q1 is None else k_gap.transfer * t.q1
    c_spec1 = np.conj(h1) * c_spec1_h
    if want_model and t.q1 is not None:
        c_q1 = np.sum(np.conj(t.spec1 * k_gap.transfer) * c_spec1_h, axis=0)
        grads["pupil1"] = 2.0 * _pupil_backward(model.pupil1, t.center, c_q1.shape, c_q1)
    c_f1 = uifft2(c_spec1)

    c_s1 = np.sum(np.conj(t.illum) * c_f1, axis=0)
    if want_model:
        tilts, amps = model.sources_for(t.source_set)
        c_p = np.conj(t.s1)[None] * c_f1
        grads["src_amps"] = 2.0 * np.real(np.sum(np.conj(c_p) * t.unit_illum, axis=(1, 2)))
        shape_up = t.s1.shape
        yy, xx = spatial_coords(shape_up, config.sim_pitch)
        prod = np.imag(np.conj(t.illum) * c_p)
        g_my = 2.0 * np.sum(prod * yy[None, :, None], axis=(1, 2))
        g_mx = 2.0 * np.sum(prod * xx[None, None, :], axis=(1, 2))
        grads["src_tilts"] = np.stack([g_my, g_mx], axis=-1)
        if t.source_set != "multi":
            # The dedicated single-source path is a fixed reference.
            grads.pop("src_amps")
            grads.pop("src_tilts")

    g_lut1, g_fr1, g_d1 = _slm_stage_backward(t.phi1u, t.d1, model.lut1, model.fringe1, t.s1, c_s1, up)
    g_lut2, g_fr2, g_d2 = _slm_stage_backward(t.phi2u, t.d2, model.lut2, model.fringe2, t.s2, c_s2, up)
    if want_model:
        grads["lut1"], grads["fringe1"] = g_lut1, g_fr1
        grads["lut2"], grads["fringe2"] = g_lut2, g_fr2
    if want_patterns:
        grads["d1"], grads["d2"] = g_d1, g_d2
    return grads


# ---------------------------------------------------------------------------
# synthetic capture datasets


@dataclass(frozen=True)
class CaptureRecord:
    """One capture: digital patterns, source configuration, plane, image."""

    d1: np.ndarray
    d2: np.ndarray
    source_set: str
    z: float
    capture: np.ndarray
    blur_sigma: float = 0.0


@dataclass(frozen=True)
class CaptureDataset:
    records: tuple
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.records:
            raise ValueError("dataset needs at least one record")
        shapes = {r.d1.shape for r in self.records}
        if len(shapes) != 1:
            raise ValueError("all records must share the SLM shape")
        object.__setattr__(self, "records", tuple(self.records))

    def subset(self, source_set=None, blurred=None) -> list:
        out = []
        for r in self.records:
            if source_set is not None and r.source_set != source_set:
                continue
            if blurred is True and r.blur_sigma <= 0:
                continue
            out.append(r)
        return out

    def save(self, directory) -> None:
        arrays = {}
        index = []
        for i, r in enumerate(self.records):
            arrays[f"d1_{i:04d}"] = r.d1
            arrays[f"d2_{i:04d}"] = r.d2
            arrays[f"cap_{i:04d}"] = r.capture
            index.append({"source_set": r.source_set, "z": r.z, "blur_sigma": r.blur_sigma})
        tensorio.write_bundle(directory, arrays, {"index": index, **self.metadata})

    @staticmethod
    def load(directory) -> "CaptureDataset":
        arrays, meta = tensorio.read_bundle(directory)
        index = meta.pop("index")
        records = [
            CaptureRecord(arrays[f"d1_{i:04d}"], arrays[f"d2_{i:04d}"], e["source_set"],
                          e["z"], arrays[f"cap_{i:04d}"], e["blur_sigma"])
            for i, e in enumerate(index)
        ]
        return CaptureDataset(tuple(records), meta)


def render_capture(model: CalibModel, d1, d2, source_set, z, config: SystemConfig,
                   wavelength=None, noise_sigma: float = 0.0, rng=None,
                   band_limit="none") -> np.ndarray:
    """Camera seam: render a capture with the oracle model, optionally with
    Gaussian sensor noise (sigma relative to the mean intensity)."""
    capture = calibrated_forward(model, d1, d2, source_set, z, config, wavelength, band_limit)
    if noise_sigma > 0:
        rng = np.random.default_rng(0) if rng is None else rng
        capture = capture + rng.normal(0.0, noise_sigma * capture.mean(), capture.shape)
        capture = np.clip(capture, 0.0, None)
    return capture


def make_synthetic_dataset(oracle: CalibModel, config: SystemConfig, shape,
                           n_per_config: int = 32, source_sets=("single", "multi"),
                           schedule=(4.0, 2.0, 1.0, 0.0), z=None, wavelength=None,
                           noise_sigma: float = 0.0, seed: int = 0,
                           band_limit="none") -> CaptureDataset:
    """Random SLM patterns rendered through the oracle model.

    Patterns are uniform random digital values; the blur schedule applies a
    Gaussian filter of the listed sigmas (in SLM pixels, cycled per record)
    to create low-frequency training data, which stabilizes warp and source
    fitting. sigma 0 leaves the pattern unfiltered.
    """
    rng = np.random.default_rng(seed)
    z = config.planes[len(config.planes) // 2] if z is None else z
    records = []
    for source_set in source_sets:
        for i in range(n_per_config):
            sigma = schedule[i % len(schedule)]
            d1 = rng.integers(0, LUT_SIZE, shape).astype(np.float64)
            d2 = rng.integers(0, LUT_SIZE, shape).astype(np.float64)
            if sigma > 0:
                d1 = gaussian_filter(d1, sigma)
                d2 = gaussian_filter(d2, sigma)
            capture = render_capture(oracle, d1, d2, source_set, z, config, wavelength,
                                     noise_sigma, rng, band_limit)
            records.append(CaptureRecord(d1, d2, source_set, z, capture, sigma))
    return CaptureDataset(tuple(records), {"seed": seed, "noise_sigma": noise_sigma})


# ---------------------------------------------------------------------------
# staged fitting


STAGE_PARAMS = {
    "warp": ("warp_slm", "warp_cam"),
    "single": ("lut1", "lut2", "fringe1", "fringe2", "pupil1", "pupil2", "warp_slm", "warp_cam"),
    "source": ("src_tilts", "src_amps"),
    "finetune": ("lut1", "lut2", "fringe1", "fringe2", "pupil1", "pupil2", "warp_slm", "warp_cam"),
}
STAGE_RECORDS = {
    "warp": dict(source_set="single", blurred=True),
    "single": dict(source_set="single"),
    "source": dict(source_set="multi"),
    "finetune": dict(source_set="multi"),
}


@dataclass(frozen=True)
class FitSpec:
    """Per-stage iteration counts and per-parameter learning rates.

    fit_pupils enables the stochastic patch-based pupil fitting path (the
    loss is then evaluated on one random patch cell per record per step);
    leave it off when the system is known to be aberration-free.
    """

    iterations: dict = field(default_factory=lambda: {"warp": 120, "single": 250, "source": 150, "finetune": 120})
    learning_rates: dict = field(default_factory=dict)
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    seed: int = 0
    fit_pupils: bool = False
    # Geometric within-stage decay; Adam steps otherwise stay near the base
    # rate and jitter around the optimum instead of settling.
    lr_decay: float = 0.1

    def stage_iterations(self, stage: str) -> int:
        if isinstance(self.iterations, int):
            return self.iterations
        return self.iterations[stage]


def default_learning_rates(config: SystemConfig, shape) -> dict:
    tilt_bin = 2.0 * np.pi / (shape[1] * config.pitch)
    return {
        "lut1": 0.02, "lut2": 0.02,
        "fringe1": 0.005, "fringe2": 0.005,
        "pupil1": 0.02, "pupil2": 0.02,
        "warp_slm": 0.05, "warp_cam": 0.05,
        "src_tilts": tilt_bin / 25.0,
        "src_amps": 0.01,
    }


def _model_params(model: CalibModel) -> dict:
    return {
        "lut1": model.lut1.copy(), "lut2": model.lut2.copy(),
        "fringe1": model.fringe1.copy(), "fringe2": model.fringe2.copy(),
        "pupil1": model.pupil1.copy(), "pupil2": model.pupil2.copy(),
        "warp_slm": model.warp_slm.displacements.copy(),
        "warp_cam": model.warp_cam.displacements.copy(),
        "src_tilts": model.source_tilts.copy(),
        "src_amps": model.source_amps.copy(),
    }


def _normalize_kernel(k: np.ndarray) -> np.ndarray:
    # Fringing redistributes phase between pixels without gain; pinning the
    # kernel sum removes the scale degeneracy with the LUT.
    total = k.sum()
    return k / total if abs(total) > 0.1 else k


def _model_from_params(base: CalibModel, params: dict) -> CalibModel:
    return replace(
        base,
        lut1=params["lut1"], lut2=params["lut2"],
        fringe1=_normalize_kernel(params["fringe1"]),
        fringe2=_normalize_kernel(params["fringe2"]),
        pupil1=params["pupil1"], pupil2=params["pupil2"],
        warp_slm=base.warp_slm.with_displacements(params["warp_slm"]),
        warp_cam=base.warp_cam.with_displacements(params["warp_cam"]),
        source_tilts=params["src_tilts"],
        source_amps=np.clip(params["src_amps"], 1e-6, None),
    )


def _record_loss_grads(model, record: CaptureRecord, config, wavelength, keys, pupil_mode,
                       patch_center, cell=None):
    pred, tape = calibrated_forward(model, record.d1, record.d2, record.source_set,
                                    record.z, config, wavelength,
                                    pupil_mode=pupil_mode, patch_center=patch_center,
                                    _tape=True)
    diff = pred - record.capture
    if cell is not None:
        mask = np.zeros_like(diff)
        mask[cell[0], cell[1]] = 1.0
        diff = diff * mask
    loss = float(np.sum(diff * diff))
    grads = _calibrated_backward(model, tape, config, 2.0 * diff, wrt=("model",))
    return loss, {k: grads[k] for k in keys if k in grads}


def fit_model(dataset: CaptureDataset, init: CalibModel, config: SystemConfig,
              stages=DEFAULT_STAGES, spec: FitSpec | None = None, wavelength=None):
    """Staged gradient-descent fit of the model to a capture dataset.

    Stage order follows the calibration procedure: warps first on blurred
    single-source data, then the full single-source model, then source
    locations and intensities from multisource data, and a final multisource
    fine-tune of the non-source parameters. Returns the fitted model and the
    per-stage loss history.
    """
    spec = FitSpec() if spec is None else spec
    shape = dataset.records[0].d1.shape
    lrs = default_learning_rates(config, shape)
    lrs.update(spec.learning_rates)
    rng = np.random.default_rng(spec.seed)

    params = _model_params(init)
    history = {}
    for stage in stages:
        keys = STAGE_PARAMS[stage]
        records = dataset.subset(**STAGE_RECORDS[stage])
        if not records:
            raise ValueError(f"dataset has no records for stage {stage!r}")
        state_m = {k: np.zeros_like(params[k]) for k in keys}
        state_v = {k: np.zeros_like(np.abs(params[k])) for k in keys}
        losses = np.zeros(spec.stage_iterations(stage))
        for it in range(losses.size):
            model = _model_from_params(init, params)
            use_pupils = spec.fit_pupils or not model.has_unit_pupils()
            cells = patch_cells(model.pupil1.shape[:2], shape) if use_pupils else None
            total = 0.0
            acc = {k: np.zeros_like(params[k]) for k in keys}
            for record in records:
                if cells is None:
                    pupil_mode, center, cell = "none", (0.5, 0.5), None
                else:
                    center, sy, sx = cells[rng.integers(0, len(cells))]
                    pupil_mode, cell = "patch", (sy, sx)
                loss, grads = _record_loss_grads(model, record, config, wavelength, keys,
                                                 pupil_mode, center, cell)
                total += loss
                for k, g in grads.items():
                    acc[k] += g
            losses[it] = total / len(records)
            t = it + 1
            b1, b2 = spec.betas
            decay = spec.lr_decay ** (it / max(losses.size - 1, 1))
            for k in keys:
                g = acc[k] / len(records)
                state_m[k] = b1 * state_m[k] + (1 - b1) * g
                state_v[k] = b2 * state_v[k] + (1 - b2) * np.abs(g) ** 2
                m_hat = state_m[k] / (1 - b1 ** t)
                v_hat = state_v[k] / (1 - b2 ** t)
                params[k] = params[k] - decay * lrs[k] * m_hat / (np.sqrt(v_hat) + spec.epsilon)
        history[stage] = losses
    return _model_from_params(init, params), history


# ---------------------------------------------------------------------------
# active camera-in-the-loop


@dataclass(frozen=True)
class CitlSpec:
    iterations: int = 200
    step_size: float = 1.5
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    source_set: str = "multi"
    planes: tuple | None = None
    seed: int = 0


def active_citl(d1, d2, target, model: CalibModel, config: SystemConfig,
                spec: CitlSpec, camera=None, wavelength=None):
    """Fine-tune digital SLM patterns through the fitted model, substituting
    camera captures for the model prediction before back-propagation.

    target maps plane -> desired intensity (a FocalStackTarget or dict);
    planes cycle in order, one per iteration, covering every loss plane
    exactly once per cycle. camera(d1, d2, z) supplies captures; None falls
    back to the model output, which reduces to ordinary optimization.
    """
    planes = tuple(spec.planes) if spec.planes is not None else tuple(config.planes)
    target_map = {z: np.asarray(target.image_at(z).data, dtype=np.float64) for z in planes} \
        if hasattr(target, "image_at") else {z: np.asarray(target[z], dtype=np.float64) for z in planes}
    d1 = np.array(d1, dtype=np.float64)
    d2 = np.array(d2, dtype=np.float64)
    params = {"d1": d1, "d2": d2}
    m = {k: np.zeros_like(v) for k, v in params.items()}
    v = {k: np.zeros_like(x) for k, x in params.items()}
    rng = np.random.default_rng(spec.seed)
    use_pupils = not model.has_unit_pupils()
    cells = patch_cells(model.pupil1.shape[:2], d1.shape) if use_pupils else None
    history = np.zeros(spec.iterations)
    for it in range(spec.iterations):
        z = planes[it % len(planes)]
        if cells is None:
            pupil_mode, center = "none", (0.5, 0.5)
        else:
            center = cells[rng.integers(0, len(cells))][0]
            pupil_mode = "patch"
        pred, tape = calibrated_forward(model, params["d1"], params["d2"], spec.source_set,
                                        z, config, wavelength, pupil_mode=pupil_mode,
                                        patch_center=center, _tape=True)
        observed = pred if camera is None else camera(params["d1"], params["d2"], z)
        diff = observed - target_map[z]
        history[it] = float(np.sum(diff * diff))
        grads = _calibrated_backward(model, tape, config, 2.0 * diff, wrt=("patterns",))
        t = it + 1
        b1, b2 = spec.betas
        for k in ("d1", "d2"):
            g = grads[k]
            m[k] = b1 * m[k] + (1 - b1) * g
            v[k] = b2 * v[k] + (1 - b2) * g * g
            step = spec.step_size * (m[k] / (1 - b1 ** t)) / (np.sqrt(v[k] / (1 - b2 ** t)) + spec.epsilon)
            params[k] = np.clip(params[k] - step, 0.0, LUT_SIZE - 1)
    return params["d1"], params["d2"], history


# ---------------------------------------------------------------------------
# perturbation presets and recovery metrics

PRESETS = ("lut", "fringing", "pupil", "warp", "source", "standard")


def perturbed_model(base: CalibModel, preset: str, config: SystemConfig,
                    shape, seed: int = 0) -> CalibModel:
    """Oracle models that deviate from `base` in one named component (or
    mildly in several for 'standard')."""
    rng = np.random.default_rng(seed)
    x = np.arange(LUT_SIZE) / LUT_SIZE

    def lut_bump(phi0):
        bump = 0.12 * np.sin(2 * np.pi * (1.5 * x + phi0)) + 0.05 * np.sin(2 * np.pi * (4.0 * x + 2 * phi0))
        return bump - bump.mean()

    def fringe_mix(weight):
        size = base.fringe1.shape[0]
        r = size // 2
        yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
        blur = np.exp(-(yy ** 2 + xx ** 2) / 2.0)
        blur /= blur.sum()
        return (1 - weight) * delta_kernel(size) + weight * blur

    def warp_bowl(points, shape_px, scale):
        ny = points[:, 0] / max(shape_px[0] - 1, 1) - 0.5
        nx = points[:, 1] / max(shape_px[1] - 1, 1) - 0.5
        dy = scale * (ny ** 2 + nx ** 2 - 0.25) * 2.0
        dx = scale * nx * ny * 2.0
        return np.stack([dy, dx], axis=-1)

    out = base
    if preset in ("lut", "standard"):
        out = replace(out, lut1=out.lut1 + lut_bump(0.1), lut2=out.lut2 + lut_bump(0.45))
    if preset in ("fringing", "standard"):
        strength = 0.18 if preset == "fringing" else 0.08
        out = replace(out, fringe1=fringe_mix(strength), fringe2=fringe_mix(strength * 0.7))
    if preset == "pupil":
        pupil = out.pupil1.copy()
        ky, kx = pupil.shape[2:]
        wy = np.linspace(-1, 1, ky)[:, None]
        wx = np.linspace(-1, 1, kx)[None, :]
        phase = 0.25 * (wy ** 2 + wx ** 2 - 0.5) + 0.1 * wx
        node = (pupil.shape[0] // 2, pupil.shape[1] // 2)
        pupil[node] = pupil[node] * np.exp(1j * phase)
        out = replace(out, pupil1=pupil)
    if preset in ("warp", "standard"):
        scale = 0.7 if preset == "warp" else 0.35
        up_shape = out.warp_slm.points.max(axis=0) + 1
        disp = warp_bowl(out.warp_slm.points, up_shape, scale)
        out = replace(out, warp_slm=out.warp_slm.with_displacements(disp))
    if preset in ("source", "standard"):
        tilt_bin = 2.0 * np.pi / (shape[1] * config.pitch)
        angles = rng.uniform(0, 2 * np.pi, out.source_tilts.shape[0])
        offsets = 0.5 * tilt_bin * np.stack([np.sin(angles), np.cos(angles)], axis=-1)
        amps = out.source_amps * (1.0 + rng.uniform(-0.1, 0.1, out.source_amps.shape))
        out = replace(out, source_tilts=out.source_tilts + offsets, source_amps=amps)
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}")
    return out


def lut_rms_error(fitted: np.ndarray, oracle: np.ndarray) -> float:
    """RMS LUT error in radians after removing the unobservable piston."""
    diff = fitted - oracle
    diff = diff - diff.mean()
    return float(np.sqrt(np.mean(diff ** 2)))


def source_bin_error(fitted: CalibModel, oracle: CalibModel, config: SystemConfig, shape) -> float:
    """Worst-case source location error in frequency bins."""
    tilt_bin = 2.0 * np.pi / (shape[1] * config.pitch)
    err = np.linalg.norm(fitted.source_tilts - oracle.source_tilts, axis=-1)
    return float(err.max() / tilt_bin)


def warp_rms_error(fitted: TpsWarp, oracle: TpsWarp, shape) -> float:
    """RMS of the dense displacement-field difference in pixels."""
    d = tps_displacement(fitted, shape) - tps_displacement(oracle, shape)
    return float(np.sqrt(np.mean(np.sum(d ** 2, axis=0))))


# ---------------------------------------------------------------------------
# serialization


def save_model(directory, model: CalibModel) -> None:
    arrays = _model_params(model)
    arrays["warp_slm_points"] = model.warp_slm.points
    arrays["warp_cam_points"] = model.warp_cam.points
    arrays["single_tilt"] = model.single_tilt
    tensorio.write_bundle(directory, arrays, {"kind": "calib-model"})


def load_model(directory) -> CalibModel:
    arrays, _ = tensorio.read_bundle(directory)
    return CalibModel(
        lut1=arrays["lut1"], lut2=arrays["lut2"],
        fringe1=arrays["fringe1"], fringe2=arrays["fringe2"],
        pupil1=arrays["pupil1"], pupil2=arrays["pupil2"],
        warp_slm=TpsWarp(arrays["warp_slm_points"], arrays["warp_slm"]),
        warp_cam=TpsWarp(arrays["warp_cam_points"], arrays["warp_cam"]),
        source_tilts=arrays["src_tilts"],
        source_amps=arrays["src_amps"],
        single_tilt=arrays["single_tilt"],
    )
