"""Band-limited angular-spectrum free-space propagation and its adjoint.

The transfer function on the frequency grid (cycles/m) is

    T_z(u) = exp(2 pi j z / wl * sqrt(1 - |wl u|^2))   for |u| < 1/wl
             0                                          otherwise,

which supports signed z (backward propagation uses negative z directly).
Kernels are cached by grid geometry; the cache is invisible to semantics
and safe under concurrent reads with single-writer insertion.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from .fields import ComplexField2D, freq_coords, ufft2, uifft2

__all__ = ["AsmKernel", "asm_kernel", "propagate", "propagate_adjoint", "clear_kernel_cache"]

BAND_LIMITS = ("none", "matsushima")


@dataclass(frozen=True)
class AsmKernel:
    """Frequency-domain transfer function for one propagation distance."""

    transfer: np.ndarray
    band_mask: np.ndarray
    z: float
    wavelength: float
    pitch: float

    def __post_init__(self):
        object.__setattr__(self, "transfer", _readonly(self.transfer))
        object.__setattr__(self, "band_mask", _readonly(self.band_mask))


def _readonly(a):
    a = np.array(a, order="C")
    a.flags.writeable = False
    return a


_cache: dict = {}
_cache_lock = threading.Lock()
_CACHE_MAX = 256


def clear_kernel_cache() -> None:
    with _cache_lock:
        _cache.clear()


def asm_kernel(shape, pitch, wavelength, z, band_limit="none", precision="f64") -> AsmKernel:
    """Build (or fetch from cache) the transfer function for distance z in meters."""
    if band_limit not in BAND_LIMITS:
        raise ValueError(f"band_limit must be one of {BAND_LIMITS}, got {band_limit!r}")
    if not (pitch > 0 and wavelength > 0):
        raise ValueError("pitch and wavelength must be positive")
    key = (tuple(shape), float(pitch), float(wavelength), float(z), band_limit, precision)
    with _cache_lock:
        hit = _cache.get(key)
    if hit is not None:
        return hit

    fy, fx = freq_coords(shape, pitch)
    u2 = fy[:, None] ** 2 + fx[None, :] ** 2
    mask = u2 < (1.0 / wavelength) ** 2
    if band_limit == "matsushima":
        # Per-axis limit that keeps the kernel phase sampled below Nyquist,
        # suppressing wraparound replicas for long throws.
        ly = 1.0 / (wavelength * np.sqrt((2.0 * abs(z) / (shape[0] * pitch)) ** 2 + 1.0))
        lx = 1.0 / (wavelength * np.sqrt((2.0 * abs(z) / (shape[1] * pitch)) ** 2 + 1.0))
        mask = mask & (np.abs(fy)[:, None] <= ly) & (np.abs(fx)[None, :] <= lx)

    arg = np.sqrt(np.clip(1.0 - (wavelength ** 2) * u2, 0.0, None))
    transfer = np.where(mask, np.exp((2j * np.pi * z / wavelength) * arg), 0.0)
    if precision == "f32":
        transfer = transfer.astype(np.complex64)
    kernel = AsmKernel(transfer, mask, float(z), float(wavelength), float(pitch))
    with _cache_lock:
        if len(_cache) >= _CACHE_MAX:
            _cache.clear()
        _cache[key] = kernel
    return kernel


def propagate(field: ComplexField2D, z: float, band_limit="none") -> ComplexField2D:
    """Angular-spectrum propagation of a field by a signed distance z."""
    precision = "f32" if field.data.dtype == np.complex64 else "f64"
    kernel = asm_kernel(field.shape, field.pitch, field.wavelength, z, band_limit, precision)
    return field.with_data(uifft2(ufft2(field.data) * kernel.transfer))


def propagate_adjoint(field: ComplexField2D, z: float, band_limit="none") -> ComplexField2D:
    """Conjugate transpose of `propagate` with the same arguments.

    Satisfies <propagate(a), b> == <a, propagate_adjoint(b)> for the
    elementwise conjugate inner product.
    """
    precision = "f32" if field.data.dtype == np.complex64 else "f64"
    kernel = asm_kernel(field.shape, field.pitch, field.wavelength, z, band_limit, precision)
    return field.with_data(uifft2(ufft2(field.data) * np.conj(kernel.transfer)))
