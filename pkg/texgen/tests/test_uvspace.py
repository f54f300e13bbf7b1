import pytest
import numpy as np

from modules.types import InvalidInputError, ConfigurationError, REGION_NAMES
from modules.uvspace import (
    IUVMap, UVContext, project_to_uv, render_from_uv, exhaustive_iuv, mirror_texture,
    compose_symmetric, mask_ground_truth, occlusion_mask, build_region_partition,
)


def _iuv(parts, u=None, v=None) -> IUVMap:
    parts = np.asarray(parts, dtype=np.int64)
    u = np.zeros(parts.shape, np.float32) if u is None else np.asarray(u, np.float32)
    v = np.zeros(parts.shape, np.float32) if v is None else np.asarray(v, np.float32)
    return IUVMap(parts=parts, u=u, v=v)


class TestAtlas:
    def test_mirror_table_is_involutive(self, atlas):
        table = atlas.mirror_table()
        for part, other in table.pairs.items():
            assert table.pairs[other] == part

    def test_every_part_has_a_region(self, atlas):
        assert all(p.region in REGION_NAMES for p in atlas.parts)

    def test_head_weight_is_six(self, atlas):
        assert atlas.region_weights["head"] == 6.0
        assert all(atlas.region_weights[r] == 1.0 for r in REGION_NAMES if r != "head")


class TestProjection:
    def test_all_background_gives_empty_texture(self, atlas):
        image = np.random.default_rng(0).uniform(size=(16, 16, 3)).astype(np.float32)
        texture, mask = project_to_uv(image, _iuv(np.zeros((16, 16))), atlas, 64)
        assert not texture.any()
        assert not mask.any()

    def test_single_pixel_writes_one_texel(self, atlas):
        parts = np.zeros((4, 4)); parts[1, 2] = 1
        u = np.zeros((4, 4)); u[1, 2] = 0.5
        v = np.zeros((4, 4)); v[1, 2] = 0.5
        image = np.zeros((4, 4, 3), np.float32); image[1, 2] = (0.2, 0.4, 0.6)

        texture, mask = project_to_uv(image, _iuv(parts, u, v), atlas, 64)
        y0, x0, y1, x1 = atlas.part_rect(1, 64)
        ty, tx = y0 + (y1 - y0) // 2, x0 + (x1 - x0) // 2

        assert mask.sum() == 1
        assert mask[ty, tx] == 1
        np.testing.assert_allclose(texture[ty, tx], (0.2, 0.4, 0.6))

    def test_collisions_are_averaged(self, atlas):
        parts = np.ones((1, 2))
        image = np.array([[[0.0, 0.0, 0.0], [1.0, 0.5, 0.2]]], np.float32)
        texture, mask = project_to_uv(image, _iuv(parts, np.full((1, 2), 0.1), np.full((1, 2), 0.1)), atlas, 64)
        assert mask.sum() == 1
        np.testing.assert_allclose(texture[mask > 0][0], (0.5, 0.25, 0.1), atol=1e-6)

    def test_exhaustive_iuv_covers_uv_mask(self, atlas):
        iuv = exhaustive_iuv(atlas, 64)
        image = np.ones((64, 64, 3), np.float32)
        _, mask = project_to_uv(image, iuv, atlas, 64)
        np.testing.assert_array_equal(mask, atlas.uv_mask(64))

    def test_rendering_round_trip(self, atlas):
        iuv = exhaustive_iuv(atlas, 64)
        m_uv = atlas.uv_mask(64)
        texture = np.random.default_rng(1).uniform(size=(64, 64, 3)).astype(np.float32) * m_uv[..., None]
        projected, mask = project_to_uv(render_from_uv(texture, iuv, atlas), iuv, atlas, 64)
        np.testing.assert_allclose(projected, texture, atol=1e-6)
        _, again = project_to_uv(render_from_uv(projected, iuv, atlas), iuv, atlas, 64)
        np.testing.assert_array_equal(again, mask)

    def test_part_index_out_of_range_is_rejected(self, atlas):
        parts = np.zeros((4, 4)); parts[0, 0] = 25
        with pytest.raises(InvalidInputError):
            project_to_uv(np.zeros((4, 4, 3), np.float32), _iuv(parts), atlas, 64)

    def test_mismatched_resolution_is_rejected(self, atlas):
        with pytest.raises(InvalidInputError):
            project_to_uv(np.zeros((8, 8, 3), np.float32), _iuv(np.zeros((4, 4))), atlas, 64)


class TestMirror:
    def test_involution(self, context64, rng):
        t = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        m = (rng.uniform(size=(64, 64)) > 0.5).astype(np.float32)
        t1, m1 = mirror_texture(t, m, context64.table)
        t2, m2 = mirror_texture(t1, m1, context64.table)
        np.testing.assert_array_equal(t2, t)
        np.testing.assert_array_equal(m2, m)

    def test_symmetric_texture_is_a_fixed_point(self, context64, rng):
        t = rng.uniform(size=(64, 64, 3)).astype(np.float32)
        m = np.ones((64, 64), np.float32)
        symmetric = 0.5 * (t + mirror_texture(t, m, context64.table)[0])
        np.testing.assert_allclose(mirror_texture(symmetric, m, context64.table)[0], symmetric, atol=1e-7)

    def test_left_arm_goes_to_right_arm(self, atlas, context64):
        left = next(p for p in atlas.parts if p.name == "upper_arm_left_front")
        labels = atlas.part_labels(64)
        m = (labels == left.index).astype(np.float32)
        _, mirrored = mirror_texture(np.zeros((64, 64, 3), np.float32), m, context64.table)

        assert mirrored.sum() == m.sum()
        assert set(np.unique(labels[mirrored > 0])) == {left.mirror}


class TestComposition:
    def test_compose_matches_loop_oracle(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            m = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float32)
            t_src = rng.uniform(size=(8, 8, 3)).astype(np.float32) * m[..., None]
            t_mirror = rng.uniform(size=(8, 8, 3)).astype(np.float32)

            expected = np.zeros((8, 8, 3), np.float32)
            for y in range(8):
                for x in range(8):
                    for c in range(3):
                        expected[y, x, c] = t_src[y, x, c] + t_mirror[y, x, c] * (1.0 - m[y, x])

            assert np.abs(compose_symmetric(t_src, m, t_mirror) - expected).max() <= 1e-6

    def test_compose_limits(self, rng):
        t_src = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        t_mirror = rng.uniform(size=(8, 8, 3)).astype(np.float32)
        np.testing.assert_array_equal(compose_symmetric(t_src, np.ones((8, 8), np.float32), t_mirror), t_src)
        np.testing.assert_array_equal(compose_symmetric(np.zeros_like(t_src), np.zeros((8, 8), np.float32), t_mirror), t_mirror)

    def test_mask_ground_truth_checkerboard(self, rng):
        t = rng.uniform(0.1, 1.0, size=(8, 8, 3)).astype(np.float32)
        board = ((np.arange(8)[:, None] + np.arange(8)[None, :]) % 2).astype(np.float32)
        masked = mask_ground_truth(t, board)
        for y in range(8):
            for x in range(8):
                assert masked[y, x].any() == bool(board[y, x])

    def test_occlusion_mask_arithmetic(self, context64, rng):
        m_uv = context64.m_uv
        m_src = (rng.uniform(size=m_uv.shape) > 0.5).astype(np.float32) * m_uv
        m_occ = occlusion_mask(m_uv, m_src)
        np.testing.assert_array_equal(m_occ + m_src, m_uv)
        assert m_occ.sum() == m_uv.sum() - m_src.sum()
        assert not occlusion_mask(m_uv, m_uv).any()
        np.testing.assert_array_equal(occlusion_mask(m_uv, np.zeros_like(m_uv)), m_uv)


class TestRegionPartition:
    def test_disjoint_cover_of_uv_mask(self, context64):
        masks = np.stack([context64.partition.masks[r] for r in REGION_NAMES])
        np.testing.assert_array_equal(masks.sum(axis=0), context64.m_uv)

    def test_bboxes_are_tight(self, context64):
        for region in REGION_NAMES:
            ys, xs = np.nonzero(context64.partition.masks[region])
            assert context64.partition.bboxes[region] == (ys.min(), xs.min(), ys.max() + 1, xs.max() + 1)

    def test_unassigned_part_is_rejected(self, atlas):
        parts = [p.model_copy(update={"region": None}) if p.index == 5 else p for p in atlas.parts]
        broken = atlas.model_copy(update={"parts": parts})
        with pytest.raises(ConfigurationError):
            build_region_partition(broken.uv_mask(64), broken)

    def test_context_bundles_the_partition(self, atlas):
        context = UVContext.build(atlas, 64)
        assert context.partition.weights["head"] == 6.0
        assert context.m_uv.shape == (64, 64)
