"""Complex optical fields on regular grids, with physical-unit bookkeeping.

All field values are immutable once constructed (the backing numpy arrays
are marked read-only), so every operation here is a pure function that is
safe to call from multiple threads.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy import fft as _fft

__all__ = [
    "FieldError",
    "SizeLimitError",
    "ComplexField2D",
    "IntensityImage",
    "MAX_FIELD_PIXELS",
    "freq_coords",
    "spatial_coords",
    "fft2",
    "ifft2",
    "ufft2",
    "uifft2",
    "resample",
    "upsample_array",
    "block_mean",
    "block_sum",
    "shift_field",
    "complex_dtype",
    "real_dtype",
]

# Guard against accidentally planning enormous transforms (8192 x 8192).
MAX_FIELD_PIXELS = 1 << 26


class FieldError(ValueError):
    """Invalid field data or incompatible grids."""


class SizeLimitError(FieldError):
    """Requested transform exceeds the configured pixel limit."""


def complex_dtype(precision: str) -> np.dtype:
    """Map a precision name ('f32' or 'f64') to a complex numpy dtype."""
    if precision == "f32":
        return np.dtype(np.complex64)
    if precision == "f64":
        return np.dtype(np.complex128)
    raise FieldError(f"unknown precision {precision!r}, expected 'f32' or 'f64'")


def real_dtype(precision: str) -> np.dtype:
    if precision == "f32":
        return np.dtype(np.float32)
    if precision == "f64":
        return np.dtype(np.float64)
    raise FieldError(f"unknown precision {precision!r}, expected 'f32' or 'f64'")


def _freeze(a: np.ndarray) -> np.ndarray:
    # Copy so immutability never reaches back into caller-owned arrays.
    a = np.array(a, order="C")
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class ComplexField2D:
    """Sampled complex optical field.

    data is an H x W complex array, pitch the pixel spacing in meters, and
    wavelength the illumination wavelength in meters.
    """

    data: np.ndarray
    pitch: float
    wavelength: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2 or data.size < 1:
            raise FieldError(f"field data must be 2D and non-empty, got shape {data.shape}")
        if not np.iscomplexobj(data):
            data = data.astype(np.complex128)
        if not (np.all(np.isfinite(data.real)) and np.all(np.isfinite(data.imag))):
            raise FieldError("field contains non-finite samples")
        if not (self.pitch > 0):
            raise FieldError(f"pitch must be positive, got {self.pitch}")
        if not (self.wavelength > 0):
            raise FieldError(f"wavelength must be positive, got {self.wavelength}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def energy(self) -> float:
        return float(np.sum(np.abs(self.data.astype(np.complex128)) ** 2))

    def intensity(self) -> "IntensityImage":
        return IntensityImage(np.abs(self.data) ** 2, self.pitch)

    def with_data(self, data: np.ndarray) -> "ComplexField2D":
        return replace(self, data=data)

    def astype(self, precision: str) -> "ComplexField2D":
        return self.with_data(self.data.astype(complex_dtype(precision)))


@dataclass(frozen=True)
class IntensityImage:
    """Nonnegative intensity samples with a pixel pitch in meters."""

    data: np.ndarray
    pitch: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float64)
        if data.ndim != 2 or data.size < 1:
            raise FieldError(f"image data must be 2D and non-empty, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise FieldError("image contains non-finite samples")
        if np.any(data < 0):
            raise FieldError("image contains negative samples")
        if not (self.pitch > 0):
            raise FieldError(f"pitch must be positive, got {self.pitch}")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def total(self) -> float:
        return float(np.sum(self.data, dtype=np.float64))


def freq_coords(shape: tuple[int, int], pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """Frequency-grid coordinates in cycles/m, standard DFT layout.

    Zero frequency sits at index 0 on each axis. Every module derives its
    frequency coordinates through this constructor so the sample layout can
    never drift between operators.
    """
    fy = np.fft.fftfreq(shape[0], d=pitch)
    fx = np.fft.fftfreq(shape[1], d=pitch)
    return fy, fx


def spatial_coords(shape: tuple[int, int], pitch: float) -> tuple[np.ndarray, np.ndarray]:
    """Spatial coordinates in meters, origin on the (H//2, W//2) sample."""
    y = (np.arange(shape[0], dtype=np.float64) - shape[0] // 2) * pitch
    x = (np.arange(shape[1], dtype=np.float64) - shape[1] // 2) * pitch
    return y, x


def _check_size(shape):
    n = int(shape[-2]) * int(shape[-1])
    if n > MAX_FIELD_PIXELS:
        raise SizeLimitError(f"grid of {shape[-2]}x{shape[-1]} exceeds the {MAX_FIELD_PIXELS}-pixel limit")


def ufft2(a: np.ndarray) -> np.ndarray:
    """Unitary 2D FFT over the trailing axes of an ndarray (batch friendly)."""
    _check_size(a.shape)
    return _fft.fft2(a, axes=(-2, -1), norm="ortho")


def uifft2(a: np.ndarray) -> np.ndarray:
    """Unitary inverse 2D FFT over the trailing axes."""
    _check_size(a.shape)
    return _fft.ifft2(a, axes=(-2, -1), norm="ortho")


def fft2(field: ComplexField2D) -> ComplexField2D:
    """Unitary Fourier transform of a field (Parseval-exact convention)."""
    return field.with_data(ufft2(field.data))


def ifft2(field: ComplexField2D) -> ComplexField2D:
    return field.with_data(uifft2(field.data))


def upsample_array(a: np.ndarray, factor: int) -> np.ndarray:
    """Zero-order (pixel replication) upsampling on the trailing two axes."""
    if factor == 1:
        return a
    return np.repeat(np.repeat(a, factor, axis=-2), factor, axis=-1)


def block_mean(a: np.ndarray, factor: int) -> np.ndarray:
    """factor x factor block averaging over the trailing two axes."""
    if factor == 1:
        return a
    h, w = a.shape[-2], a.shape[-1]
    if h % factor or w % factor:
        raise FieldError(f"shape {a.shape[-2:]} not divisible by factor {factor}")
    shaped = a.reshape(a.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.mean(axis=(-3, -1))


def block_sum(a: np.ndarray, factor: int) -> np.ndarray:
    """factor x factor block summation; adjoint of `upsample_array`."""
    if factor == 1:
        return a
    h, w = a.shape[-2], a.shape[-1]
    if h % factor or w % factor:
        raise FieldError(f"shape {a.shape[-2:]} not divisible by factor {factor}")
    shaped = a.reshape(a.shape[:-2] + (h // factor, factor, w // factor, factor))
    return shaped.sum(axis=(-3, -1))


def resample(field: ComplexField2D, factor: int, direction: str) -> ComplexField2D:
    """Integer-factor resampling.

    'up' replicates each pixel factor x factor and divides the pitch;
    'down' block-averages and multiplies the pitch. down(up(f)) == f.
    """
    if not (isinstance(factor, (int, np.integer)) and factor >= 1):
        raise FieldError(f"factor must be a positive integer, got {factor}")
    factor = int(factor)
    if direction == "up":
        return ComplexField2D(upsample_array(field.data, factor), field.pitch / factor, field.wavelength)
    if direction == "down":
        return ComplexField2D(block_mean(field.data, factor), field.pitch * factor, field.wavelength)
    raise FieldError(f"direction must be 'up' or 'down', got {direction!r}")


def shift_field(field: ComplexField2D, shift: tuple[float, float]) -> ComplexField2D:
    """Translate the field pattern by (dy, dx) meters via the Fourier shift theorem.

    out(x) = field(x - shift), i.e. features move in the +shift direction;
    the shift is circular on the periodic grid.
    """
    fy, fx = freq_coords(field.shape, field.pitch)
    phase = np.exp(-2j * np.pi * (fy[:, None] * shift[0] + fx[None, :] * shift[1]))
    return field.with_data(uifft2(ufft2(field.data) * phase.astype(field.data.dtype)))
