"""Shared forward/backward engine for hologram optimization.

Evaluates the incoherent multisource image formation chain for one or more
pattern frames and, when asked, the exact gradient of the weighted L2 loss
with respect to every real SLM parameter by reverse accumulation. Complex
cotangents c follow the convention dL = 2 Re <c, dx>, which makes the
adjoint of a linear operator its conjugate transpose and turns |g|^2 into
the cotangent delta * g.
"""

from __future__ import annotations

import numpy as np

from .fields import block_mean, block_sum, complex_dtype, freq_coords, ufft2, uifft2, upsample_array
from .forward import SlmPattern, SystemConfig, eyebox_extent, slm_field_array
from .propagation import asm_kernel
from .sources import SourceArray, plane_wave_stack

__all__ = ["evaluate_patterns", "pupil_mask", "PipelineResult"]


class PipelineResult:
    """Loss, predicted stack at SLM resolution, and per-frame gradients."""

    def __init__(self, loss, predicted, gradients):
        self.loss = loss
        self.predicted = predicted
        self.gradients = gradients


def pupil_mask(shape, sim_pitch, config: SystemConfig, wavelength, center, radius) -> np.ndarray:
    """Circular pupil aperture on the eyebox plane, standard DFT layout.

    center is (y, x) in meters at the eyebox and radius the pupil radius in
    meters. Raises if the disk misses the native eyebox extent entirely.
    """
    extent = eyebox_extent(config, wavelength)
    center = np.asarray(center, dtype=np.float64)
    if np.any(np.abs(center) - radius > extent):
        raise ValueError("pupil disk does not intersect the eyebox extent")
    fy, fx = freq_coords(shape, sim_pitch)
    scale = wavelength * config.eyepiece_focal
    yy = fy * scale - center[0]
    xx = fx * scale - center[1]
    mask = (yy[:, None] ** 2 + xx[None, :] ** 2) <= radius ** 2
    if not mask.any():
        raise ValueError("pupil aperture is empty on this grid")
    return mask.astype(np.float64)


def _phase_amp_grads(pattern: SlmPattern, cotangent: np.ndarray):
    grads = {}
    if pattern.modulation == "phase":
        s = np.exp(1j * pattern.phase)
        grads["phase"] = 2.0 * np.imag(np.conj(s) * cotangent)
    elif pattern.modulation == "amplitude":
        grads["amplitude"] = 2.0 * np.real(cotangent)
    else:
        unit = np.exp(1j * pattern.phase)
        s = pattern.amplitude * unit
        grads["phase"] = 2.0 * np.imag(np.conj(s) * cotangent)
        grads["amplitude"] = 2.0 * np.real(np.conj(cotangent) * unit)
    return grads


def evaluate_patterns(frames, sources: SourceArray, config: SystemConfig, target,
                      wavelength=None, planes=None, plane_weights=None,
                      band_limit="none", precision="f64", pupil_masks=None,
                      pupil_scaled=False, want_grads=True) -> PipelineResult:
    """Forward model, loss, and gradients for a list of pattern frames.

    frames: list of (s1, s2 | None) SlmPattern pairs; multiple frames are
    temporally multiplexed (their intensities are averaged). target is a
    (P, H, W) array matching `planes`. With pupil_masks (single plane only)
    the loss averages over the given eyebox apertures; pupil_scaled applies
    a per-aperture least-squares brightness scale, held constant in the
    backward pass.
    """
    wavelength = config.wavelengths[0] if wavelength is None else float(wavelength)
    planes = config.planes if planes is None else tuple(np.atleast_1d(planes))
    n_planes = len(planes)
    pw = np.ones(n_planes) if plane_weights is None else np.asarray(plane_weights, dtype=np.float64)
    if pw.shape != (n_planes,) or np.any(pw < 0) or not pw.sum() > 0:
        raise ValueError("plane weights must be nonnegative with positive sum")
    if pupil_masks is not None and n_planes != 1:
        raise ValueError("pupil-sampled evaluation supervises a single plane")

    dtype = complex_dtype(precision)
    n_frames = len(frames)
    two_slm = frames[0][1] is not None
    if two_slm and n_frames > 1:
        raise ValueError("temporal multiplexing is a single-modulator mode")

    up = config.upsample
    shape_slm = frames[0][0].shape
    shape = (shape_slm[0] * up, shape_slm[1] * up)
    pitch = config.sim_pitch
    n_src = len(sources)

    u1 = np.stack([upsample_array(slm_field_array(s1, dtype), up) for s1, _ in frames])
    illum_src = plane_wave_stack(sources.tilts, shape, pitch, wavelength, dtype)
    # Batch axis = frame x source.
    illum = np.tile(illum_src, (n_frames, 1, 1))
    f1 = np.repeat(u1, n_src, axis=0) * illum
    weights = np.tile(sources.intensities.astype(np.float64), n_frames) / n_frames

    spectrum = ufft2(f1)
    f2 = None
    u2 = None
    if two_slm:
        gap = config.require_gap()
        k_gap = asm_kernel(shape, pitch, wavelength, gap, band_limit, precision)
        f2 = uifft2(spectrum * k_gap.transfer)
        u2 = upsample_array(slm_field_array(frames[0][1], dtype), up)
        spectrum = ufft2(f2 * u2[None])

    target = None if target is None else np.asarray(target, dtype=np.float64)
    loss = 0.0
    predicted = []
    c_spectrum = np.zeros_like(spectrum) if want_grads else None
    n_pupils = 1 if pupil_masks is None else len(pupil_masks)

    for ip, z in enumerate(planes):
        k = asm_kernel(shape, pitch, wavelength, z, band_limit, precision)
        g = uifft2(spectrum * k.transfer)
        eyebox = ufft2(g) if pupil_masks is not None else None
        plane_pred = None
        c_g = np.zeros_like(g) if want_grads else None
        for m in range(n_pupils):
            if pupil_masks is None:
                e = g
            else:
                e = uifft2(eyebox * pupil_masks[m])
            per = e.real.astype(np.float64) ** 2 + e.imag.astype(np.float64) ** 2
            intensity = block_mean(np.einsum("i,ihw->hw", weights, per), up)
            plane_pred = intensity if plane_pred is None else plane_pred + intensity
            if target is not None:
                scale = 1.0
                if pupil_scaled:
                    denom = float(np.sum(intensity * intensity))
                    scale = float(np.sum(intensity * target[ip])) / denom if denom > 0 else 1.0
                diff = scale * intensity - target[ip]
                loss += pw[ip] * float(np.sum(diff * diff)) / n_pupils
                if want_grads:
                    delta = (2.0 * pw[ip] * scale / n_pupils) * diff
                    delta_up = upsample_array(delta, up) / (up * up)
                    c_e = (weights[:, None, None] * delta_up[None]).astype(dtype) * e
                    if pupil_masks is None:
                        c_g += c_e
                    else:
                        c_g += uifft2(ufft2(c_e) * pupil_masks[m])
        predicted.append(plane_pred / n_pupils)
        if want_grads and target is not None:
            c_spectrum += np.conj(k.transfer) * ufft2(c_g)

    gradients = None
    if want_grads and target is not None:
        grads_s2 = None
        if two_slm:
            c_f3 = uifft2(c_spectrum)
            c_u2 = np.sum(np.conj(f2) * c_f3, axis=0)
            grads_s2 = _phase_amp_grads(frames[0][1], block_sum(c_u2, up))
            c_f2 = np.conj(u2)[None] * c_f3
            k_gap = asm_kernel(shape, pitch, wavelength, config.gap, band_limit, precision)
            c_f1 = uifft2(np.conj(k_gap.transfer) * ufft2(c_f2))
        else:
            c_f1 = uifft2(c_spectrum)
        c_u1_all = np.conj(illum) * c_f1
        c_u1 = c_u1_all.reshape(n_frames, n_src, *shape).sum(axis=1)
        gradients = []
        for i, (s1, s2) in enumerate(frames):
            entry = {"s1": _phase_amp_grads(s1, block_sum(c_u1[i], up))}
            if s2 is not None:
                entry["s2"] = grads_s2
            gradients.append(entry)

    return PipelineResult(loss, np.stack(predicted), gradients)
