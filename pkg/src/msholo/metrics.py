"""Image quality metrics and eyebox diagnostics.

PSNR uses the target's maximum as the peak unless told otherwise. SSIM is
the standard windowed form with an 11-tap Gaussian window (sigma 1.5) and
constants K1=0.01, K2=0.03 on [0, 1]-normalized inputs. Michelson contrast
is evaluated per grating period and averaged, which keeps isolated speckle
spikes from inflating the score.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import fftconvolve

from .fields import ComplexField2D, IntensityImage, ufft2

__all__ = [
    "psnr",
    "ssim",
    "michelson_contrast",
    "speckle_contrast",
    "MetricReport",
    "stack_report",
    "EyeboxReport",
    "eyebox_report",
]


def _as_array(img) -> np.ndarray:
    if isinstance(img, IntensityImage):
        return img.data.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


def psnr(image, reference, peak: float | None = None) -> float:
    """10 log10(peak^2 / MSE); +inf for identical inputs."""
    a, b = _as_array(image), _as_array(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    peak = float(b.max()) if peak is None else float(peak)
    if peak <= 0:
        raise ValueError("peak must be positive")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gaussian_window(taps: int = 11, sigma: float = 1.5) -> np.ndarray:
    half = (taps - 1) / 2.0
    x = np.arange(taps) - half
    w1 = np.exp(-(x ** 2) / (2 * sigma * sigma))
    w = np.outer(w1, w1)
    return w / w.sum()


def ssim(image, reference, peak: float = 1.0) -> float:
    """Mean structural similarity over the image (Gaussian 11x11 window)."""
    a, b = _as_array(image), _as_array(reference)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    w = _gaussian_window()

    def filt(x):
        return fftconvolve(x, w, mode="valid")

    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a ** 2
    var_b = filt(b * b) - mu_b ** 2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def michelson_contrast(image, region: tuple[int, int] = (100, 100), period: int = 2,
                       axis: int = 1) -> float:
    """Grating contrast (Imax - Imin) / (Imax + Imin), computed per period
    cell inside a centered region and averaged."""
    a = _as_array(image)
    rh, rw = region
    if rh > a.shape[0] or rw > a.shape[1]:
        raise ValueError(f"region {region} exceeds image {a.shape}")
    y0 = (a.shape[0] - rh) // 2
    x0 = (a.shape[1] - rw) // 2
    crop = a[y0:y0 + rh, x0:x0 + rw]
    if axis == 0:
        crop = crop.T
        rh, rw = rw, rh
    n_periods = crop.shape[1] // period
    cells = crop[:, : n_periods * period].reshape(rh, n_periods, period)
    imax = cells.max(axis=2)
    imin = cells.min(axis=2)
    denom = imax + imin
    contrast = np.where(denom > 0, (imax - imin) / np.where(denom > 0, denom, 1.0), 0.0)
    return float(np.mean(contrast))


def speckle_contrast(image, window: int | None = None) -> float:
    """Standard deviation over mean of intensity.

    With a window, the statistic is computed over non-overlapping
    window x window tiles of a nominally uniform region and averaged.
    """
    a = _as_array(image)
    if window is None:
        mean = float(a.mean())
        if mean == 0:
            raise ValueError("zero-mean region has no defined speckle contrast")
        return float(a.std() / mean)
    if window < 2:
        raise ValueError("window must be at least 2 pixels")
    ny, nx = a.shape[0] // window, a.shape[1] // window
    if ny < 1 or nx < 1:
        raise ValueError("window larger than image")
    tiles = a[: ny * window, : nx * window].reshape(ny, window, nx, window)
    means = tiles.mean(axis=(1, 3))
    if np.any(means == 0):
        raise ValueError("zero-mean tile has no defined speckle contrast")
    stds = tiles.std(axis=(1, 3))
    return float(np.mean(stds / means))


@dataclass
class MetricReport:
    """Focal-stack quality summary with a per-plane breakdown."""

    psnr_stack: float
    psnr_planes: list
    ssim_stack: float
    ssim_planes: list
    michelson: float | None = None
    speckle: float | None = None
    extras: dict = field(default_factory=dict)

    @property
    def psnr_plane_mean(self) -> float:
        return float(np.mean(self.psnr_planes))

    def rows(self):
        """CSV-ready (name, value) rows."""
        rows = [("psnr_stack_db", self.psnr_stack),
                ("psnr_plane_mean_db", self.psnr_plane_mean),
                ("ssim_stack", self.ssim_stack)]
        for i, (p, s) in enumerate(zip(self.psnr_planes, self.ssim_planes)):
            rows.append((f"psnr_plane{i}_db", p))
            rows.append((f"ssim_plane{i}", s))
        if self.michelson is not None:
            rows.append(("michelson", self.michelson))
        if self.speckle is not None:
            rows.append(("speckle_contrast", self.speckle))
        rows.extend(sorted(self.extras.items()))
        return rows

    def summary(self) -> str:
        parts = [f"PSNR {self.psnr_stack:.2f} dB (stack)",
                 f"{self.psnr_plane_mean:.2f} dB (plane mean)",
                 f"SSIM {self.ssim_stack:.4f}"]
        if self.michelson is not None:
            parts.append(f"contrast {self.michelson:.3f}")
        if self.speckle is not None:
            parts.append(f"speckle {self.speckle:.3f}")
        return ", ".join(parts)


def stack_report(predicted, target, normalize: bool = True) -> MetricReport:
    """PSNR and SSIM for a predicted focal stack against a target.

    The stack PSNR treats all planes as one concatenated image; per-plane
    values are also reported since the literature uses both conventions.
    """
    pred = np.stack([_as_array(p) for p in predicted])
    tgt = np.stack([_as_array(t) for t in target])
    if pred.shape != tgt.shape:
        raise ValueError("stack shapes differ")
    peak = float(tgt.max())
    psnr_planes = [psnr(pred[i], tgt[i], peak) for i in range(pred.shape[0])]
    psnr_stack = psnr(pred.reshape(-1, pred.shape[-1]), tgt.reshape(-1, tgt.shape[-1]), peak)
    scale = 1.0 / peak if normalize else 1.0
    ssim_planes = [ssim(pred[i] * scale, tgt[i] * scale) for i in range(pred.shape[0])]
    ssim_stack = float(np.mean(ssim_planes))
    return MetricReport(psnr_stack, psnr_planes, ssim_stack, ssim_planes)


@dataclass
class EyeboxReport:
    intensity: IntensityImage
    peak_mean_ratio: float
    central_energy_fraction: float
    total_energy: float

    def log_image(self, floor_db: float = -60.0) -> np.ndarray:
        """Log-scaled intensity mapped to [0, 1] for export."""
        data = self.intensity.data
        peak = data.max()
        if peak <= 0:
            return np.zeros_like(data)
        db = 10.0 * np.log10(np.maximum(data / peak, 10 ** (floor_db / 10.0)))
        return (db - floor_db) / (-floor_db)


def eyebox_report(fields, config=None, weights=None, central_area_fraction: float = 0.01) -> EyeboxReport:
    """Incoherent eyebox intensity and uniformity statistics.

    fields are per-source complex fields at the eyepiece focal plane (image
    space); their Fourier intensities add with the given weights. With a
    SystemConfig the reported pitch is the eyebox sample spacing
    wl * f / (W * pitch). The central energy fraction integrates a centered
    rectangle covering `central_area_fraction` of the eyebox area.
    """
    if isinstance(fields, ComplexField2D):
        fields = [fields]
    weights = np.ones(len(fields)) if weights is None else np.asarray(weights, dtype=np.float64)
    total = None
    if config is not None:
        f0 = fields[0]
        pitch = f0.wavelength * config.eyepiece_focal / (f0.shape[1] * f0.pitch)
    else:
        pitch = fields[0].pitch
    for w, f in zip(weights, fields):
        e = np.fft.fftshift(ufft2(f.data))
        contribution = w * (np.abs(e.astype(np.complex128)) ** 2)
        total = contribution if total is None else total + contribution
    h, w_ = total.shape
    side = math.sqrt(central_area_fraction)
    ch = max(1, int(round(h * side)))
    cw = max(1, int(round(w_ * side)))
    y0 = (h - ch) // 2
    x0 = (w_ - cw) // 2
    energy = float(total.sum())
    central = float(total[y0:y0 + ch, x0:x0 + cw].sum())
    report = EyeboxReport(
        intensity=IntensityImage(total, pitch),
        peak_mean_ratio=float(total.max() / total.mean()),
        central_energy_fraction=central / energy if energy > 0 else 0.0,
        total_energy=energy,
    )
    return report
