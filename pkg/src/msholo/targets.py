"""Target generation: focal stacks with incoherent defocus blur, gratings,
and a procedural demo scene.

Defocus blur uses an area-sampled circular top-hat kernel whose radius
grows linearly with distance from the layer (default 4 px per mm, matched
to the maximum diffraction angle of an 8 um SLM pixel). Layers composite
nearest-first with the over operator on blurred coverage masks.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .fields import IntensityImage
from .forward import SystemConfig

__all__ = [
    "DEFAULT_BLUR_PX_PER_MM",
    "FocalStackTarget",
    "SceneLayer",
    "LayeredScene",
    "disk_kernel",
    "disk_blur",
    "render_focal_stack",
    "make_grating_target",
    "demo_scene",
    "demo_image",
]

DEFAULT_BLUR_PX_PER_MM = 4.0


@dataclass(frozen=True)
class FocalStackTarget:
    """Target intensities at the configured planes, plus the scale applied
    to bring the mean per-plane energy to the normalization value."""

    planes: tuple
    images: tuple
    normalization: float = 1.0

    def __post_init__(self):
        if len(self.planes) != len(self.images) or not self.planes:
            raise ValueError("one image per plane required")
        shapes = {img.shape for img in self.images}
        if len(shapes) != 1:
            raise ValueError("all plane images must share a shape")

    @property
    def shape(self):
        return self.images[0].shape

    def image_at(self, z: float) -> IntensityImage:
        for plane, img in zip(self.planes, self.images):
            if plane == z:
                return img
        raise KeyError(f"no target plane at z={z}")

    def stack_array(self) -> np.ndarray:
        return np.stack([img.data for img in self.images])

    def normalized(self, energy: float) -> "FocalStackTarget":
        """Rescale so the mean per-plane total equals `energy`."""
        mean_total = float(np.mean([img.total() for img in self.images]))
        if mean_total <= 0:
            raise ValueError("cannot normalize an all-zero target")
        scale = energy / mean_total
        images = tuple(IntensityImage(img.data * scale, img.pitch) for img in self.images)
        return FocalStackTarget(self.planes, images, energy)


@dataclass(frozen=True)
class SceneLayer:
    depth: float
    image: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        image = np.asarray(self.image, dtype=np.float64)
        mask = np.asarray(self.mask, dtype=np.float64)
        if image.shape != mask.shape or image.ndim != 2:
            raise ValueError("layer image and mask must be matching 2D arrays")
        if mask.min() < 0 or mask.max() > 1:
            raise ValueError("coverage mask must lie in [0, 1]")
        object.__setattr__(self, "image", image)
        object.__setattr__(self, "mask", mask)


@dataclass(frozen=True)
class LayeredScene:
    """Depth layers ordered nearest (occluding) to farthest."""

    layers: tuple

    def __post_init__(self):
        if not self.layers:
            raise ValueError("scene must contain at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))

    @property
    def shape(self):
        return self.layers[0].image.shape


def disk_kernel(radius: float) -> np.ndarray:
    """Normalized area-sampled circular top-hat; sums to 1 for every radius.

    Radii below half a pixel return the identity kernel.
    """
    if radius < 0:
        raise ValueError("radius must be nonnegative")
    if radius < 0.5:
        return np.ones((1, 1))
    r = int(np.ceil(radius))
    y, x = np.mgrid[-r:r + 1, -r:r + 1]
    d = np.hypot(y, x)
    # Linear edge ramp approximates the pixel-area overlap with the disk.
    kernel = np.clip(radius - d + 0.5, 0.0, 1.0)
    return kernel / kernel.sum()


def disk_blur(image: np.ndarray, radius: float) -> np.ndarray:
    kernel = disk_kernel(radius)
    if kernel.size == 1:
        return np.asarray(image, dtype=np.float64)
    out = fftconvolve(np.asarray(image, dtype=np.float64), kernel, mode="same")
    return np.clip(out, 0.0, None)


def render_focal_stack(scene: LayeredScene, config: SystemConfig,
                       blur_px_per_mm: float = DEFAULT_BLUR_PX_PER_MM) -> FocalStackTarget:
    """Render the scene at every configured plane with defocus blur.

    At plane z each layer is blurred by radius blur_px_per_mm * |z - depth|
    (premultiplied by its coverage mask) and composited front to back.
    """
    if blur_px_per_mm < 0:
        raise ValueError("blur rate must be nonnegative")
    images = []
    for z in config.planes:
        out = np.zeros(scene.shape)
        transmit = np.ones(scene.shape)
        for layer in scene.layers:
            radius = blur_px_per_mm * abs(z - layer.depth) * 1e3
            color = disk_blur(layer.image * layer.mask, radius)
            mask = np.clip(disk_blur(layer.mask, radius), 0.0, 1.0)
            out += transmit * color
            transmit = transmit * (1.0 - mask)
        images.append(IntensityImage(np.clip(out, 0.0, None), config.pitch))
    return FocalStackTarget(config.planes, tuple(images))


def make_grating_target(config: SystemConfig, focus_z: float, period_px: int = 2,
                        blur_px_per_mm: float = DEFAULT_BLUR_PX_PER_MM,
                        shape=None) -> FocalStackTarget:
    """Binary vertical grating in focus at focus_z, defocus-blurred elsewhere.

    The default two-pixel period is the highest spatial frequency the SLM
    can produce.
    """
    if period_px < 2:
        raise ValueError("grating period must be at least 2 pixels")
    if shape is None:
        raise ValueError("grating target needs an explicit SLM shape")
    cols = np.arange(shape[1])
    grating = ((cols % period_px) < (period_px // 2)).astype(np.float64)
    image = np.broadcast_to(grating, shape).copy()
    scene = LayeredScene((SceneLayer(focus_z, image, np.ones(shape)),))
    return render_focal_stack(scene, config, blur_px_per_mm)


def _value_noise(shape, cell: int, rng) -> np.ndarray:
    """Smooth random texture from bilinear upsampling of coarse noise."""
    gy = shape[0] // cell + 2
    gx = shape[1] // cell + 2
    coarse = rng.random((gy, gx))
    y = np.arange(shape[0]) / cell
    x = np.arange(shape[1]) / cell
    iy = y.astype(int)
    ix = x.astype(int)
    fy = (y - iy)[:, None]
    fx = (x - ix)[None, :]
    a = coarse[iy][:, ix]
    b = coarse[iy][:, ix + 1]
    c = coarse[iy + 1][:, ix]
    d = coarse[iy + 1][:, ix + 1]
    return (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx)


def demo_image(shape, seed: int = 7) -> np.ndarray:
    """Deterministic natural-looking test image in [0, 1]: multi-octave
    noise over a gradient, plus fine texture and sharp features so that
    resolution loss actually registers in the metrics."""
    rng = np.random.default_rng(seed)
    h, w = shape
    img = 0.25 + 0.5 * np.linspace(0, 1, w)[None, :] * np.ones((h, 1))
    octaves = ((max(4, h // 4), 0.3), (max(2, h // 8), 0.2), (max(2, h // 16), 0.12),
               (2, 0.1))
    for cell, weight in octaves:
        img = img + weight * (_value_noise(shape, cell, rng) - 0.5)
    y, x = np.mgrid[0:h, 0:w]
    disk = ((y - 0.35 * h) ** 2 + (x - 0.3 * w) ** 2) < (0.12 * min(h, w)) ** 2
    img[disk] = 0.9
    bar = (np.abs(y - 0.7 * h) < 0.04 * h) & (x > 0.15 * w) & (x < 0.85 * w)
    img[bar] = 0.08
    # fine checker patch and thin line pair (pixel-scale detail)
    checker = ((y + x) % 2).astype(np.float64)
    patch = (y > 0.1 * h) & (y < 0.28 * h) & (x > 0.55 * w) & (x < 0.85 * w)
    img[patch] = 0.2 + 0.6 * checker[patch]
    lines = ((x == int(0.45 * w)) | (x == int(0.45 * w) + 3)) & (y > 0.4 * h) & (y < 0.95 * h)
    img[lines] = 1.0
    return np.clip(img, 0.0, 1.0)


def demo_scene(shape, config: SystemConfig, seed: int = 7) -> LayeredScene:
    """Two-layer scene: a finely textured near object over a textured
    backdrop, with depths at the first and last configured planes."""
    rng = np.random.default_rng(seed)
    h, w = shape
    back = demo_image(shape, seed)
    front = 0.25 + 0.55 * _value_noise(shape, max(2, h // 6), rng)
    front += 0.2 * (_value_noise(shape, 2, rng) - 0.5)
    y, x = np.mgrid[0:h, 0:w]
    front_mask = (((y - 0.6 * h) / (0.28 * h)) ** 2 + ((x - 0.62 * w) / (0.2 * w)) ** 2 < 1.0)
    near = SceneLayer(config.planes[0], np.clip(front, 0, 1) * front_mask, front_mask.astype(np.float64))
    far = SceneLayer(config.planes[-1], back, np.ones(shape))
    return LayeredScene((near, far))
