"""Plane-wave source arrays, tilt fields, and the decorrelation spacing rule.

Tilt vectors are phase slopes in rad/m, stored as (m_y, m_x) to match the
(row, column) axis order of the field arrays. A tilt m illuminates the SLM
at angle theta = wl * |m| / (2 pi) from the optical axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fields import ComplexField2D, spatial_coords

__all__ = [
    "MAX_TILT_DEG",
    "SourceArray",
    "GridSpec",
    "make_grid",
    "plane_wave",
    "plane_wave_stack",
    "tilt_angle",
    "memory_effect_spacing",
    "grid_spacing_from_geometry",
    "expected_shift",
    "count_in_memory_region",
]

# Hard paraxial guard; the shift-equivalence analysis assumes small angles
# and the experimental geometry stays below 0.69 degrees.
MAX_TILT_DEG = 5.0


@dataclass(frozen=True)
class SourceArray:
    """Mutually incoherent plane-wave sources: tilts (N, 2) rad/m, intensities (N,)."""

    tilts: np.ndarray
    intensities: np.ndarray

    def __post_init__(self):
        tilts = np.atleast_2d(np.array(self.tilts, dtype=np.float64))
        intensities = np.atleast_1d(np.array(self.intensities, dtype=np.float64))
        if tilts.ndim != 2 or tilts.shape[1] != 2 or tilts.shape[0] < 1:
            raise ValueError(f"tilts must be (N, 2), got {tilts.shape}")
        if intensities.shape != (tilts.shape[0],):
            raise ValueError("one intensity per source required")
        if np.any(intensities < 0) or not np.sum(intensities) > 0:
            raise ValueError("intensities must be nonnegative with positive sum")
        if tilts.shape[0] > 1:
            flat = [tuple(t) for t in tilts]
            if len(set(flat)) != len(flat):
                raise ValueError("tilt vectors must be distinct")
        tilts.flags.writeable = False
        intensities.flags.writeable = False
        object.__setattr__(self, "tilts", tilts)
        object.__setattr__(self, "intensities", intensities)

    def __len__(self) -> int:
        return self.tilts.shape[0]

    def scaled(self, factor: float) -> "SourceArray":
        return SourceArray(self.tilts.copy(), self.intensities * factor)


@dataclass(frozen=True)
class GridSpec:
    """Evenly spaced rows x cols source grid with spacing in rad/m."""

    rows: int
    cols: int
    spacing: float
    offset: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid must have at least one source")
        if self.spacing < 0:
            raise ValueError("spacing must be nonnegative")


def make_grid(spec: GridSpec) -> SourceArray:
    """Centered source grid with uniform intensity 1 / (rows * cols).

    Axis coordinates are (k - (n - 1) / 2) * spacing, so the tilt set is
    symmetric about the offset and has zero mean when the offset is zero.
    """
    ky = (np.arange(spec.rows) - (spec.rows - 1) / 2.0) * spec.spacing + spec.offset[0]
    kx = (np.arange(spec.cols) - (spec.cols - 1) / 2.0) * spec.spacing + spec.offset[1]
    tilts = np.stack(np.meshgrid(ky, kx, indexing="ij"), axis=-1).reshape(-1, 2)
    n = spec.rows * spec.cols
    if n > 1 and spec.spacing == 0:
        # Coincident grid points collapse to a single source.
        tilts = tilts[:1]
        n = 1
    return SourceArray(tilts, np.full(tilts.shape[0], 1.0 / n))


def tilt_angle(tilt, wavelength: float) -> float:
    """Angle of incidence in radians for a tilt vector in rad/m."""
    return wavelength * float(np.linalg.norm(np.asarray(tilt, dtype=np.float64))) / (2.0 * np.pi)


def check_paraxial(tilt, wavelength: float) -> None:
    theta = tilt_angle(tilt, wavelength)
    if theta > np.deg2rad(MAX_TILT_DEG):
        raise ValueError(
            f"tilt angle {np.rad2deg(theta):.2f} deg exceeds the {MAX_TILT_DEG} deg paraxial guard"
        )


def plane_wave_stack(tilts: np.ndarray, shape, pitch: float, wavelength: float,
                     dtype=np.complex128) -> np.ndarray:
    """Unit-amplitude tilt fields exp(j x . m) for a stack of tilts, shape (N, H, W)."""
    tilts = np.atleast_2d(np.asarray(tilts, dtype=np.float64))
    for t in tilts:
        check_paraxial(t, wavelength)
    y, x = spatial_coords(shape, pitch)
    phase = tilts[:, 0, None, None] * y[None, :, None] + tilts[:, 1, None, None] * x[None, None, :]
    return np.exp(1j * phase).astype(dtype)


def plane_wave(tilt, shape, pitch: float, wavelength: float, dtype=np.complex128) -> ComplexField2D:
    """Unit-amplitude plane wave with linear phase x . m and zero phase at the origin."""
    data = plane_wave_stack(np.asarray(tilt, dtype=np.float64)[None, :], shape, pitch, wavelength, dtype)[0]
    return ComplexField2D(data, pitch, wavelength)


def memory_effect_spacing(pitch: float, wavelength: float, gap: float) -> float:
    """Minimum source spacing (rad/m) that shifts the field at the second
    modulator by one pixel, decorrelating neighboring sources."""
    if not (pitch > 0 and wavelength > 0 and gap > 0):
        raise ValueError("pitch, wavelength, and gap must be positive")
    return 2.0 * np.pi * pitch / (wavelength * gap)


def grid_spacing_from_geometry(separation: float, collimator_focal: float, wavelength: float) -> float:
    """Tilt spacing in rad/m for point sources `separation` meters apart
    behind a collimator of the given focal length."""
    theta = separation / collimator_focal
    return 2.0 * np.pi * theta / wavelength


def expected_shift(tilt, wavelength: float, z: float) -> np.ndarray:
    """Lateral translation (dy, dx) in meters of the propagated field under a tilt.

    A tilt m shifts the on-axis pattern by wl * z * m / (2 pi) after
    propagating a distance z, up to a carrier wave.
    """
    return np.asarray(tilt, dtype=np.float64) * wavelength * z / (2.0 * np.pi)


def count_in_memory_region(sources: SourceArray, threshold: float) -> int:
    """Number of sources with at least one neighbor closer than the
    decorrelation threshold (such pairs produce correlated output)."""
    tilts = sources.tilts
    n = len(sources)
    if n == 1:
        return 0
    d = np.linalg.norm(tilts[:, None, :] - tilts[None, :, :], axis=-1)
    np.fill_diagonal(d, np.inf)
    return int(np.count_nonzero(d.min(axis=1) < threshold))
