import pytest
import numpy as np

from modules.types import InvalidInputError, REGION_NAMES
from modules.augment import (
    AugmentConfig, alpha_schedule, tps_fit, control_grid, warp_region, region_wise_augment,
    apply_color_jitter, color_jitter, pad_bbox,
)


@pytest.mark.parametrize("step, expected", [(0, 0.0), (1, 0.125), (2, 0.15), (3, 0.175), (7, 0.275)])
def test_alpha_schedule_table(step, expected):
    assert alpha_schedule(step, 0.025) == pytest.approx(expected, abs=1e-12)


def test_alpha_schedule_rejects_negative_step():
    with pytest.raises(InvalidInputError):
        alpha_schedule(-1, 0.025)


def test_alpha_schedule_is_affine_after_step_zero():
    values = [alpha_schedule(step, 0.03) for step in range(1, 8)]
    assert np.allclose(np.diff(values), 0.03)


class TestTps:
    def test_identity(self):
        src = control_grid(4)
        tps = tps_fit(src, src)
        dense = control_grid(25)
        assert np.abs(tps(dense) - dense).max() <= 1e-6

    def test_translation_is_reproduced_everywhere(self):
        src = control_grid(4)
        shift = np.array([0.07, -0.03])
        tps = tps_fit(src, src + shift)
        dense = control_grid(17)
        np.testing.assert_allclose(tps(dense), dense + shift, atol=1e-6)

    def test_interpolates_random_control_points(self):
        rng = np.random.default_rng(3)
        src = rng.uniform(size=(16, 2))
        dst = src + rng.uniform(-0.1, 0.1, size=(16, 2))
        tps = tps_fit(src, dst)
        assert np.abs(tps(src) - dst).max() <= 1e-4

    def test_collinear_points_are_singular(self):
        src = np.column_stack((np.linspace(0, 1, 5), np.linspace(0, 1, 5)))
        with pytest.raises(np.linalg.LinAlgError):
            tps_fit(src, src)

    def test_needs_three_points(self):
        with pytest.raises(InvalidInputError):
            tps_fit(np.zeros((2, 2)), np.zeros((2, 2)))


class TestWarpRegion:
    def test_identity_keeps_the_crop(self, rng):
        t = rng.uniform(size=(12, 12, 3)).astype(np.float32)
        mask = np.ones((12, 12), np.float32)
        bbox = (2, 3, 10, 11)
        out = warp_region(t, mask, bbox, tps_fit(control_grid(4), control_grid(4)))
        np.testing.assert_allclose(out[2:10, 3:11], t[2:10, 3:11], atol=1e-5)
        assert not out[:2].any() and not out[10:].any()

    def test_translation_by_two_texels(self, rng):
        t = rng.uniform(size=(10, 10, 3)).astype(np.float32)
        mask = np.ones((10, 10), np.float32)
        bbox = (0, 0, 10, 10)
        src = control_grid(4)
        # output reads 2 texels to the left: content moves right by 2
        out = warp_region(t, mask, bbox, tps_fit(src, src - np.array([2 / 10, 0.0])))
        np.testing.assert_allclose(out[:, 2:], t[:, :-2], atol=1e-5)
        assert np.abs(out[:, :2]).max() <= 1e-5

    def test_reads_only_inside_the_crop(self, rng):
        t = np.zeros((16, 16, 3), np.float32)
        t[4:12, 4:12] = rng.choice([0.25, 0.75], size=(8, 8, 1))
        t[:4] = 0.5  # outside the bbox
        mask = np.ones((16, 16), np.float32)
        src = control_grid(4)
        out = warp_region(t, mask, (4, 4, 12, 12), tps_fit(src, src + rng.uniform(-0.2, 0.2, size=src.shape)))
        assert not out[:4].any() and not out[12:].any()
        assert out.max() <= 0.75 + 1e-6

    def test_empty_bbox_gives_zero(self, rng):
        t = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        assert not warp_region(t, np.ones((8, 8), np.float32), None, tps_fit(control_grid(3), control_grid(3))).any()
        assert not warp_region(t, np.ones((8, 8), np.float32), (2, 2, 2, 5), tps_fit(control_grid(3), control_grid(3))).any()

    def test_pad_bbox_clips_to_texture(self):
        assert pad_bbox((1, 2, 10, 60), 4, (64, 62)) == (0, 0, 14, 62)


class TestRegionWiseAugment:
    def _texture(self, context, rng):
        return rng.uniform(size=(64, 64, 3)).astype(np.float32) * context.m_uv[..., None]

    @pytest.mark.parametrize("kind", ["region_tps", "global_tps", "region_rotate", "region_translate"])
    def test_alpha_zero_is_identity(self, context64, rng, kind):
        t = self._texture(context64, rng)
        out = region_wise_augment(t, context64.partition, context64.m_uv, 0.0, rng, AugmentConfig(kind=kind))
        np.testing.assert_array_equal(out, t)

    @pytest.mark.parametrize("kind", ["region_tps", "global_tps", "region_rotate", "region_translate"])
    def test_zero_outside_uv_mask(self, context64, rng, kind):
        t = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        out = region_wise_augment(t, context64.partition, context64.m_uv, 0.3, rng, AugmentConfig(kind=kind))
        assert not out[context64.m_uv == 0].any()

    def test_regions_do_not_bleed(self, context64, rng):
        t = np.zeros((64, 64, 3), np.float32)
        t[context64.partition.masks["head"] > 0] = 1.0
        out = region_wise_augment(t, context64.partition, context64.m_uv, 0.3, rng)
        assert not out[context64.partition.masks["head"] == 0].any()

    def test_impulse_displacement_is_bounded(self, context64, rng):
        alpha = 0.1
        region = "body"
        y0, x0, y1, x1 = context64.partition.bboxes[region]
        t = np.zeros((64, 64, 3), np.float32)
        cy, cx = (y0 + y1) // 2, (x0 + x1) // 2
        t[cy, cx] = 1.0
        out = region_wise_augment(t, context64.partition, context64.m_uv, alpha, rng)

        padding = AugmentConfig().bbox_padding
        diagonal = np.hypot(y1 - y0 + 2 * padding, x1 - x0 + 2 * padding)
        py, px = np.unravel_index(np.argmax(out[..., 0]), out.shape[:2])
        # TPS interpolation can overshoot its control shifts slightly; allow a couple of texels of slack
        assert np.hypot(py - cy, px - cx) <= alpha * diagonal + 2.0

    def test_all_regions_are_kept(self, context64, rng):
        t = self._texture(context64, rng)
        out = region_wise_augment(t, context64.partition, context64.m_uv, 0.1, rng)
        for region in REGION_NAMES:
            assert out[context64.partition.masks[region] > 0].any()


class TestColorJitter:
    def test_zero_amplitude_is_identity(self, rng):
        t = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        config = AugmentConfig(jitter_brightness=0.0, jitter_contrast=0.0, jitter_hue=0.0)
        np.testing.assert_allclose(color_jitter(t, rng, config), t, atol=1e-6)

    def test_brightness_on_mid_gray(self):
        t = np.full((8, 8, 3), 0.5, np.float32)
        np.testing.assert_allclose(apply_color_jitter(t, brightness=0.1), 0.6, atol=1e-6)

    def test_output_is_clamped(self, rng):
        for _ in range(20):
            t = rng.uniform(size=(8, 8, 3)).astype(np.float32)
            out = color_jitter(t, rng, AugmentConfig(jitter_brightness=0.8, jitter_contrast=0.9, jitter_hue=0.5))
            assert out.min() >= 0.0 and out.max() <= 1.0
