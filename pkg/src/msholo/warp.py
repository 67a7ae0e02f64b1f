"""Thin-plate-spline warping of sampled fields, with hand-derived adjoints.

A warp is parameterized by fixed control points (pixel coordinates) and
learnable per-point displacements. The dense displacement field is linear
in the control displacements, so it is evaluated through a precomputed
basis matrix; warped values come from bilinear interpolation applied to
the real and imaginary parts separately (pull-back convention: the output
at pixel x samples the input at x + displacement(x)). Zero displacements
reproduce the input bit-exactly.
"""

from __future__ import annotations

import threading
import warnings
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TpsWarp",
    "control_grid",
    "tps_displacement",
    "tps_apply",
    "tps_apply_backward",
    "bilinear_sample",
]


@dataclass(frozen=True)
class TpsWarp:
    """Control points (K, 2) in (y, x) pixels and displacements (K, 2)."""

    points: np.ndarray
    displacements: np.ndarray

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64)
        disp = np.array(self.displacements, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 2 or points.shape[0] < 3:
            raise ValueError("need at least 3 control points of shape (K, 2)")
        if disp.shape != points.shape:
            raise ValueError("displacements must match control points")
        points.flags.writeable = False
        disp.flags.writeable = False
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "displacements", disp)

    def with_displacements(self, disp) -> "TpsWarp":
        return TpsWarp(self.points, disp)

    @property
    def is_identity(self) -> bool:
        return bool(np.all(self.displacements == 0.0))


def control_grid(shape, rows: int = 4, cols: int = 4) -> np.ndarray:
    """Evenly spaced control points covering the image, corners included."""
    ys = np.linspace(0, shape[0] - 1, rows)
    xs = np.linspace(0, shape[1] - 1, cols)
    return np.stack(np.meshgrid(ys, xs, indexing="ij"), axis=-1).reshape(-1, 2)


def _tps_u(r2: np.ndarray) -> np.ndarray:
    # U(r) = r^2 log r, evaluated safely at r = 0.
    out = np.zeros_like(r2)
    nz = r2 > 0
    out[nz] = 0.5 * r2[nz] * np.log(r2[nz])
    return out


_basis_cache: dict = {}
_basis_lock = threading.Lock()


def _tps_basis(points: np.ndarray, shape) -> np.ndarray:
    """Matrix B with disp_flat = B @ d_axis for one displacement axis."""
    key = (points.tobytes(), tuple(shape))
    with _basis_lock:
        hit = _basis_cache.get(key)
    if hit is not None:
        return hit
    k = points.shape[0]
    d2 = np.sum((points[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    kernel = _tps_u(d2)
    p = np.column_stack([np.ones(k), points])
    lmat = np.zeros((k + 3, k + 3))
    lmat[:k, :k] = kernel
    lmat[:k, k:] = p
    lmat[k:, :k] = p.T
    g = np.linalg.solve(lmat, np.eye(k + 3)[:, :k])

    y, x = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    pix = np.column_stack([y.ravel(), x.ravel()])
    d2p = np.sum((pix[:, None, :] - points[None, :, :]) ** 2, axis=-1)
    phi = np.column_stack([_tps_u(d2p), np.ones(pix.shape[0]), pix])
    basis = phi @ g
    basis.flags.writeable = False
    with _basis_lock:
        if len(_basis_cache) > 32:
            _basis_cache.clear()
        _basis_cache[key] = basis
    return basis


def tps_displacement(warp: TpsWarp, shape) -> np.ndarray:
    """Dense (2, H, W) displacement field in pixels."""
    if warp.is_identity:
        return np.zeros((2,) + tuple(shape))
    basis = _tps_basis(warp.points, shape)
    dy = (basis @ warp.displacements[:, 0]).reshape(shape)
    dx = (basis @ warp.displacements[:, 1]).reshape(shape)
    return np.stack([dy, dx])


def _sample_indices(ys, xs, shape):
    h, w = shape
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    i0 = np.clip(np.floor(yc).astype(np.intp), 0, h - 2) if h > 1 else np.zeros_like(yc, dtype=np.intp)
    j0 = np.clip(np.floor(xc).astype(np.intp), 0, w - 2) if w > 1 else np.zeros_like(xc, dtype=np.intp)
    fy = yc - i0
    fx = xc - j0
    return i0, j0, fy, fx


def bilinear_sample(img: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Bilinear interpolation with replicated borders (coords clamped)."""
    i0, j0, fy, fx = _sample_indices(ys, xs, img.shape)
    a = img[i0, j0]
    b = img[i0, j0 + 1]
    c = img[i0 + 1, j0]
    d = img[i0 + 1, j0 + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def _identity_backward(img, cot):
    """Fast path of `_sample_backward` for zero displacement."""
    h, w = img.shape
    gy = np.zeros_like(img)
    gx = np.zeros_like(img)
    if h > 2:
        gy[1:h - 1] = (img[2:h] - img[1:h - 1]) * cot[1:h - 1]
    if w > 2:
        gx[:, 1:w - 1] = (img[:, 2:w] - img[:, 1:w - 1]) * cot[:, 1:w - 1]
    return cot.copy(), gy, gx


def _sample_backward(img, ys, xs, cot):
    """Adjoints of bilinear sampling: cotangent on the image and the
    per-pixel derivative of the loss with respect to (ys, xs)."""
    h, w = img.shape
    i0, j0, fy, fx = _sample_indices(ys, xs, img.shape)
    n = img.size
    idx = (i0 * w + j0).ravel()
    c_img = (
        np.bincount(idx, ((1 - fy) * (1 - fx) * cot).ravel(), minlength=n)
        + np.bincount(idx + 1, ((1 - fy) * fx * cot).ravel(), minlength=n)
        + np.bincount(idx + w, (fy * (1 - fx) * cot).ravel(), minlength=n)
        + np.bincount(idx + w + 1, (fy * fx * cot).ravel(), minlength=n)
    ).reshape(img.shape)

    a = img[i0, j0]
    b = img[i0, j0 + 1]
    c = img[i0 + 1, j0]
    d = img[i0 + 1, j0 + 1]
    dval_dy = (c - a) * (1 - fx) + (d - b) * fx
    dval_dx = (b - a) * (1 - fy) + (d - c) * fy
    inside_y = (ys > 0) & (ys < h - 1)
    inside_x = (xs > 0) & (xs < w - 1)
    return c_img, cot * dval_dy * inside_y, cot * dval_dx * inside_x


def _warp_coords(warp: TpsWarp, shape):
    y, x = np.mgrid[0:shape[0], 0:shape[1]].astype(np.float64)
    disp = tps_displacement(warp, shape)
    return y + disp[0], x + disp[1]


def check_foldover(warp: TpsWarp, shape) -> bool:
    """Warn when the warp map is non-injective (Jacobian flips sign)."""
    disp = tps_displacement(warp, shape)
    dyy, dyx = np.gradient(disp[0])
    dxy, dxx = np.gradient(disp[1])
    det = (1 + dyy) * (1 + dxx) - dyx * dxy
    folded = bool(det.min() <= 0)
    if folded:
        warnings.warn("TPS warp folds over (non-injective mapping)", RuntimeWarning)
    return folded


def tps_apply(field: np.ndarray, warp: TpsWarp, warn_foldover: bool = False) -> np.ndarray:
    """Warp a real or complex 2D array; real and imaginary parts are
    resampled independently."""
    if warp.is_identity:
        return field.copy()
    if warn_foldover:
        check_foldover(warp, field.shape)
    ys, xs = _warp_coords(warp, field.shape)
    if np.iscomplexobj(field):
        out = bilinear_sample(field.real, ys, xs) + 1j * bilinear_sample(field.imag, ys, xs)
        return out.astype(field.dtype)
    return bilinear_sample(field, ys, xs).astype(field.dtype)


def tps_apply_backward(field: np.ndarray, warp: TpsWarp, cotangent: np.ndarray):
    """Backward pass of `tps_apply`.

    Returns (c_field, g_displacements) where the cotangent convention is
    dL = 2 Re <c, dx> for complex arrays and dL = sum(c * dx) when both
    field and cotangent are real. g_displacements is the plain (K, 2) real
    gradient of the loss with respect to the control displacements.
    """
    shape = field.shape
    if warp.is_identity:
        def backward(img, cot):
            return _identity_backward(img, cot)
    else:
        ys, xs = _warp_coords(warp, shape)

        def backward(img, cot):
            return _sample_backward(img, ys, xs, cot)

    if np.iscomplexobj(field):
        c_re, gy_r, gx_r = backward(np.ascontiguousarray(field.real), 2.0 * cotangent.real)
        c_im, gy_i, gx_i = backward(np.ascontiguousarray(field.imag), 2.0 * cotangent.imag)
        c_field = 0.5 * (c_re + 1j * c_im)
        gy = gy_r + gy_i
        gx = gx_r + gx_i
    else:
        c_field, gy, gx = backward(field, cotangent)
    basis = _tps_basis(warp.points, shape)
    g_disp = np.stack([basis.T @ gy.ravel(), basis.T @ gx.ravel()], axis=-1)
    return c_field, g_disp
