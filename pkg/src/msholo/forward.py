"""Image formation models: single source, multisource with one SLM, and
multisource with two stacked SLMs.

Per-source evaluation order is upsample, tilt, modulate, propagate,
(modulate, propagate for the second SLM), then block-average the intensity
back to SLM resolution. Intensities accumulate over sources in float64
regardless of the field compute precision.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .fields import (
    ComplexField2D,
    IntensityImage,
    FieldError,
    block_mean,
    complex_dtype,
    ufft2,
    uifft2,
    upsample_array,
)
from .propagation import asm_kernel
from .sources import SourceArray, plane_wave_stack

__all__ = [
    "SlmPattern",
    "SystemConfig",
    "slm_field_array",
    "forward_single",
    "forward_multisource_1slm",
    "forward_multisource_2slm",
    "forward_multisource_stack",
    "field_at_eyebox_plane",
    "eyebox_extent",
]

MODULATIONS = ("phase", "amplitude", "complex")


@dataclass(frozen=True)
class SlmPattern:
    """Real-valued modulator state.

    Phase is stored unwrapped in radians (wrap to (-pi, pi] only on export);
    amplitude lives in [0, 1]. The realized complex modulation is
    amplitude * exp(j * phase) with the missing plane defaulting to 1 or 0.
    """

    modulation: str
    pitch: float
    phase: np.ndarray | None = None
    amplitude: np.ndarray | None = None

    def __post_init__(self):
        if self.modulation not in MODULATIONS:
            raise ValueError(f"modulation must be one of {MODULATIONS}")
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        phase, amplitude = self.phase, self.amplitude
        if self.modulation in ("phase", "complex"):
            if phase is None:
                raise ValueError(f"{self.modulation} modulation requires a phase plane")
            phase = np.array(phase, dtype=np.float64)
            if phase.ndim != 2 or not np.all(np.isfinite(phase)):
                raise ValueError("phase must be a finite 2D array")
        if self.modulation in ("amplitude", "complex"):
            if amplitude is None:
                raise ValueError(f"{self.modulation} modulation requires an amplitude plane")
            amplitude = np.array(amplitude, dtype=np.float64)
            if amplitude.ndim != 2 or not np.all(np.isfinite(amplitude)):
                raise ValueError("amplitude must be a finite 2D array")
            if amplitude.min() < 0 or amplitude.max() > 1:
                raise ValueError("amplitude must lie in [0, 1]")
        if self.modulation == "phase":
            amplitude = None
        if self.modulation == "amplitude":
            phase = None
        if phase is not None and amplitude is not None and phase.shape != amplitude.shape:
            raise ValueError("phase and amplitude shapes must match")
        for a in (phase, amplitude):
            if a is not None:
                a.flags.writeable = False
        object.__setattr__(self, "phase", phase)
        object.__setattr__(self, "amplitude", amplitude)

    @property
    def shape(self) -> tuple[int, int]:
        plane = self.phase if self.phase is not None else self.amplitude
        return plane.shape

    def replace_planes(self, phase=None, amplitude=None) -> "SlmPattern":
        return replace(
            self,
            phase=self.phase if phase is None else phase,
            amplitude=self.amplitude if amplitude is None else amplitude,
        )


def slm_field_array(pattern: SlmPattern, dtype=np.complex128) -> np.ndarray:
    """Complex modulation function realized by a pattern."""
    if pattern.modulation == "phase":
        return np.exp(1j * pattern.phase).astype(dtype)
    if pattern.modulation == "amplitude":
        return pattern.amplitude.astype(dtype)
    return (pattern.amplitude * np.exp(1j * pattern.phase)).astype(dtype)


@dataclass(frozen=True)
class SystemConfig:
    """Display geometry and sampling.

    pitch: SLM pixel pitch in meters (both modulators share it).
    gap: axial distance between the two SLMs in meters.
    wavelengths: one entry per color channel, meters.
    planes: target propagation distances from the second SLM, meters.
    upsample: simulation oversampling factor (anti-aliasing), >= 1.
    eyepiece_focal: focal length of the eyepiece forming the eyebox.
    eyebox_plane: distance of the eyepiece focal plane; defaults to the
    middle target plane.
    """

    pitch: float
    gap: float
    wavelengths: tuple
    planes: tuple
    upsample: int = 1
    eyepiece_focal: float = 27.5e-3
    eyebox_plane: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "wavelengths", tuple(float(w) for w in np.atleast_1d(self.wavelengths)))
        object.__setattr__(self, "planes", tuple(float(z) for z in np.atleast_1d(self.planes)))
        if not self.pitch > 0:
            raise ValueError("pitch must be positive")
        if any(w <= 0 for w in self.wavelengths) or not self.wavelengths:
            raise ValueError("wavelengths must be positive and non-empty")
        if not self.planes:
            raise ValueError("at least one target plane required")
        if any(b <= a for a, b in zip(self.planes, self.planes[1:])):
            raise ValueError("planes must be strictly increasing")
        if not (isinstance(self.upsample, (int, np.integer)) and self.upsample >= 1):
            raise ValueError("upsample must be a positive integer")

    @property
    def eyebox_z(self) -> float:
        if self.eyebox_plane is not None:
            return self.eyebox_plane
        return self.planes[len(self.planes) // 2]

    @property
    def sim_pitch(self) -> float:
        return self.pitch / self.upsample

    def require_gap(self) -> float:
        if not self.gap > 0:
            raise ValueError("two-SLM models require a positive SLM gap")
        return self.gap


def _check_grids(*patterns: SlmPattern):
    base = patterns[0]
    for p in patterns[1:]:
        if p.shape != base.shape or p.pitch != base.pitch:
            raise FieldError("SLM grids must match in shape and pitch")


def forward_single(slm: SlmPattern, illum: ComplexField2D, z: float,
                   band_limit="none") -> tuple[ComplexField2D, IntensityImage]:
    """Field and intensity a distance z from a single modulator under the
    given illumination (no resampling; grids must already match)."""
    if illum.shape != slm.shape or illum.pitch != slm.pitch:
        raise FieldError("illumination grid must match the SLM grid")
    modulated = illum.data * slm_field_array(slm, illum.data.dtype)
    kernel = asm_kernel(illum.shape, illum.pitch, illum.wavelength, z, band_limit,
                        "f32" if illum.data.dtype == np.complex64 else "f64")
    out = uifft2(ufft2(modulated) * kernel.transfer)
    field = ComplexField2D(out, illum.pitch, illum.wavelength)
    return field, field.intensity()


def _upsampled_fields(config: SystemConfig, wavelength, patterns, dtype):
    up = config.upsample
    fields = [upsample_array(slm_field_array(p, dtype), up) for p in patterns]
    shape = fields[0].shape
    return fields, shape, config.sim_pitch


def forward_multisource_stack(s1: SlmPattern, s2: SlmPattern | None, sources: SourceArray,
                              config: SystemConfig, planes=None, wavelength=None,
                              band_limit="none", precision="f64") -> list[IntensityImage]:
    """Incoherent multisource intensity at each requested plane.

    With s2 the chain is tilt * s1 -> propagate(gap) -> * s2 -> propagate(z);
    without s2 it is the single-modulator chain tilt * s1 -> propagate(z).
    """
    wavelength = config.wavelengths[0] if wavelength is None else wavelength
    planes = config.planes if planes is None else tuple(np.atleast_1d(planes))
    dtype = complex_dtype(precision)
    patterns = (s1,) if s2 is None else (s1, s2)
    _check_grids(*patterns)
    fields, shape, pitch = _upsampled_fields(config, wavelength, patterns, dtype)

    illum = plane_wave_stack(sources.tilts, shape, pitch, wavelength, dtype)
    spectrum = ufft2(illum * fields[0][None])
    if s2 is not None:
        gap = config.require_gap()
        k_gap = asm_kernel(shape, pitch, wavelength, gap, band_limit, precision)
        mid = uifft2(spectrum * k_gap.transfer)
        spectrum = ufft2(mid * fields[1][None])

    weights = sources.intensities.astype(np.float64)
    out = []
    for z in planes:
        k = asm_kernel(shape, pitch, wavelength, z, band_limit, precision)
        g = uifft2(spectrum * k.transfer)
        per_source = (g.real.astype(np.float64) ** 2 + g.imag.astype(np.float64) ** 2)
        intensity = np.einsum("i,ihw->hw", weights, per_source)
        out.append(IntensityImage(block_mean(intensity, config.upsample), config.pitch))
    return out


def forward_multisource_1slm(slm: SlmPattern, sources: SourceArray, config: SystemConfig,
                             z: float, wavelength=None, band_limit="none",
                             precision="f64") -> IntensityImage:
    """Sum of per-source intensities for a single modulator."""
    return forward_multisource_stack(slm, None, sources, config, (z,), wavelength,
                                     band_limit, precision)[0]


def forward_multisource_2slm(s1: SlmPattern, s2: SlmPattern, sources: SourceArray,
                             config: SystemConfig, z: float, wavelength=None,
                             band_limit="none", precision="f64") -> IntensityImage:
    """Sum of per-source intensities for the two-SLM stack."""
    return forward_multisource_stack(s1, s2, sources, config, (z,), wavelength,
                                     band_limit, precision)[0]


def fields_at_plane(s1: SlmPattern, s2: SlmPattern | None, sources: SourceArray,
                    config: SystemConfig, z: float, wavelength=None,
                    band_limit="none", precision="f64") -> list[ComplexField2D]:
    """Per-source complex fields a distance z out (simulation resolution)."""
    wavelength = config.wavelengths[0] if wavelength is None else wavelength
    dtype = complex_dtype(precision)
    patterns = (s1,) if s2 is None else (s1, s2)
    _check_grids(*patterns)
    fields, shape, pitch = _upsampled_fields(config, wavelength, patterns, dtype)
    illum = plane_wave_stack(sources.tilts, shape, pitch, wavelength, dtype)
    spectrum = ufft2(illum * fields[0][None])
    if s2 is not None:
        gap = config.require_gap()
        k_gap = asm_kernel(shape, pitch, wavelength, gap, band_limit, precision)
        spectrum = ufft2(uifft2(spectrum * k_gap.transfer) * fields[1][None])
    k = asm_kernel(shape, pitch, wavelength, z, band_limit, precision)
    g = uifft2(spectrum * k.transfer)
    return [ComplexField2D(g[i], pitch, wavelength) for i in range(g.shape[0])]


def eyebox_extent(config: SystemConfig, wavelength: float) -> float:
    """Half-width in meters of the native eyebox set by the SLM pitch."""
    return wavelength * config.eyepiece_focal / (2.0 * config.pitch)


def field_at_eyebox_plane(s1: SlmPattern, s2: SlmPattern | None, tilt, config: SystemConfig,
                          wavelength=None, band_limit="none", precision="f64") -> ComplexField2D:
    """Complex field at the eyebox for one source: the Fourier transform of
    the field at the eyepiece focal plane, returned in centered layout.

    The returned pitch is the eyebox sample spacing wl * f / (N * pitch).
    """
    wavelength = config.wavelengths[0] if wavelength is None else wavelength
    dtype = complex_dtype(precision)
    patterns = (s1,) if s2 is None else (s1, s2)
    _check_grids(*patterns)
    fields, shape, pitch = _upsampled_fields(config, wavelength, patterns, dtype)

    illum = plane_wave_stack(np.asarray(tilt, dtype=np.float64)[None], shape, pitch, wavelength, dtype)[0]
    g = illum * fields[0]
    if s2 is not None:
        gap = config.require_gap()
        k_gap = asm_kernel(shape, pitch, wavelength, gap, band_limit, precision)
        g = uifft2(ufft2(g) * k_gap.transfer) * fields[1]
    k = asm_kernel(shape, pitch, wavelength, config.eyebox_z, band_limit, precision)
    g_z0 = uifft2(ufft2(g) * k.transfer)
    eyebox = np.fft.fftshift(ufft2(g_z0))
    sample_pitch = wavelength * config.eyepiece_focal / (shape[1] * pitch)
    return ComplexField2D(eyebox, sample_pitch, wavelength)
