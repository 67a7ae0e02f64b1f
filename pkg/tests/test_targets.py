import numpy as np
import pytest

from msholo.forward import SystemConfig
from msholo.targets import (
    FocalStackTarget,
    LayeredScene,
    SceneLayer,
    demo_image,
    demo_scene,
    disk_blur,
    disk_kernel,
    make_grating_target,
    render_focal_stack,
)
from msholo.metrics import michelson_contrast


def config(planes=(15e-3, 20e-3, 25e-3)):
    return SystemConfig(pitch=8e-6, gap=2e-3, wavelengths=(520e-9,), planes=planes, upsample=1)


class TestDiskKernel:
    @pytest.mark.parametrize("radius", [0.0, 0.4, 1.0, 2.5, 4.0, 7.3])
    def test_unit_sum(self, radius):
        assert disk_kernel(radius).sum() == pytest.approx(1.0, rel=1e-12)

    def test_small_radius_identity(self):
        assert disk_kernel(0.49).shape == (1, 1)

    def test_rotational_symmetry(self):
        k = disk_kernel(3.0)
        assert np.allclose(k, k.T)
        assert np.allclose(k, k[::-1, ::-1])

    def test_delta_becomes_disk(self):
        img = np.zeros((33, 33))
        img[16, 16] = 1.0
        out = disk_blur(img, 4.0)
        assert out.sum() == pytest.approx(1.0, rel=1e-9)
        # energy confined to the disk support
        y, x = np.mgrid[0:33, 0:33]
        outside = np.hypot(y - 16, x - 16) > 5.0
        assert out[outside].max() < 1e-12


class TestRenderFocalStack:
    def test_in_focus_layer_unblurred(self, rng):
        img = rng.random((16, 16))
        scene = LayeredScene((SceneLayer(20e-3, img, np.ones((16, 16))),))
        stack = render_focal_stack(scene, config())
        assert np.allclose(stack.image_at(20e-3).data, img, atol=1e-12)

    def test_blur_radius_matches_rate(self):
        img = np.zeros((33, 33))
        img[16, 16] = 1.0
        scene = LayeredScene((SceneLayer(20e-3, img, np.ones((33, 33))),))
        stack = render_focal_stack(scene, config(planes=(19e-3, 20e-3, 21e-3)), blur_px_per_mm=4.0)
        defocused = stack.image_at(21e-3).data
        oracle = disk_blur(img, 4.0)
        assert np.allclose(defocused, oracle, atol=1e-12)

    def test_zero_blur_rate_all_in_focus(self, rng):
        img = rng.random((8, 8))
        scene = LayeredScene((SceneLayer(20e-3, img, np.ones((8, 8))),))
        stack = render_focal_stack(scene, config(), blur_px_per_mm=0.0)
        for plane_img in stack.images:
            assert np.allclose(plane_img.data, img, atol=1e-12)

    def test_two_layer_occlusion(self):
        near = np.ones((8, 8))
        mask = np.zeros((8, 8))
        mask[:, :4] = 1.0
        far = np.full((8, 8), 0.5)
        scene = LayeredScene((
            SceneLayer(15e-3, near * mask, mask),
            SceneLayer(25e-3, far, np.ones((8, 8))),
        ))
        stack = render_focal_stack(scene, config(planes=(15e-3, 25e-3)), blur_px_per_mm=0.0)
        composite = stack.image_at(15e-3).data
        assert np.allclose(composite[:, :4], 1.0)
        assert np.allclose(composite[:, 4:], 0.5)

    def test_normalization_scalar(self, rng):
        img = rng.random((8, 8))
        scene = LayeredScene((SceneLayer(20e-3, img, np.ones((8, 8))),))
        stack = render_focal_stack(scene, config()).normalized(64.0)
        totals = [i.total() for i in stack.images]
        assert np.mean(totals) == pytest.approx(64.0, rel=1e-12)
        assert stack.normalization == 64.0


class TestGratingTarget:
    def test_in_focus_alternating_columns(self):
        cfg = config(planes=(15.7e-3, 20e-3, 24.3e-3))
        stack = make_grating_target(cfg, focus_z=20e-3, shape=(16, 16))
        in_focus = stack.image_at(20e-3).data
        assert np.array_equal(in_focus[:, ::2], np.ones((16, 8)))
        assert np.array_equal(in_focus[:, 1::2], np.zeros((16, 8)))

    def test_ideal_contrast_is_one(self):
        cfg = config(planes=(20e-3,))
        stack = make_grating_target(cfg, focus_z=20e-3, shape=(16, 16))
        assert michelson_contrast(stack.image_at(20e-3).data, region=(16, 16)) == 1.0

    def test_defocused_contrast_matches_oracle(self):
        cfg = config(planes=(19e-3, 20e-3))
        stack = make_grating_target(cfg, focus_z=20e-3, shape=(32, 32), blur_px_per_mm=4.0)
        cols = np.arange(32)
        grating = np.broadcast_to(((cols % 2) < 1).astype(float), (32, 32))
        oracle = disk_blur(grating, 4.0)
        measured = michelson_contrast(stack.image_at(19e-3).data, region=(16, 16))
        expected = michelson_contrast(oracle, region=(16, 16))
        assert measured == pytest.approx(expected, abs=1e-12)

    def test_contrast_monotone_in_defocus(self):
        # A discrete disk at the Nyquist grating leaves a ripple of ~1e-2
        # that oscillates with kernel parity; monotonicity holds above it.
        cfg = config(planes=tuple(np.linspace(15e-3, 25e-3, 5)))
        stack = make_grating_target(cfg, focus_z=15e-3, shape=(32, 32))
        contrasts = [michelson_contrast(img.data, region=(16, 16)) for img in stack.images]
        assert all(a >= b - 0.02 for a, b in zip(contrasts, contrasts[1:]))
        assert contrasts[0] == 1.0 and contrasts[-1] < 0.05


class TestDemoScene:
    def test_deterministic(self):
        a = demo_image((32, 32), seed=7)
        b = demo_image((32, 32), seed=7)
        assert np.array_equal(a, b)
        assert a.min() >= 0 and a.max() <= 1

    def test_layers_match_config_planes(self):
        cfg = config()
        scene = demo_scene((32, 32), cfg)
        assert scene.layers[0].depth == cfg.planes[0]
        assert scene.layers[-1].depth == cfg.planes[-1]
