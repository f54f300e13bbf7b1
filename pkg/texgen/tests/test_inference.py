import os, pytest
import numpy as np

import utils.images as images
from modules.types import InvalidInputError
from modules.inference import TexturePipeline, infer


@pytest.fixture(scope="module")
def pipeline(checkpoints) -> TexturePipeline:
    return TexturePipeline.from_checkpoints(*checkpoints)


@pytest.fixture
def sample(fixture_root):
    path = lambda folder: os.path.join(fixture_root, folder, "0000.png")
    return {
        "normal": images.read_normal(path("normals")),
        "partial": images.read_texture(path("partial")),
        "mask": images.read_mask(path("masks")),
        "image": images.read_texture(path("images")),
        "iuv": images.read_iuv(path("iuv")),
    }


def outside(context):
    return context.m_uv < 0.5


def test_final_texture_is_bounded_and_masked(pipeline, sample):
    result = pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"])
    assert result.t_final.shape == (64, 64, 3)
    assert result.t_final.min() >= 0.0 and result.t_final.max() <= 1.0
    assert np.all(result.t_final[outside(pipeline.context)] == 0.0)
    assert result.t_refine is not None and result.m_blend is not None


def test_disabled_refiner_returns_the_sample(pipeline, sample):
    result = pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"], use_refiner=False)
    assert np.array_equal(result.t_final, result.t_sample)
    assert result.t_refine is None


def test_blend_override_one_keeps_the_sample(pipeline, sample):
    result = pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"], blend_override=1.0)
    assert np.allclose(result.t_final, np.clip(result.t_sample, 0.0, 1.0), atol=1e-6)
    assert np.all(result.m_blend == 1.0)


def test_blend_override_zero_keeps_the_refinement(pipeline, sample):
    result = pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"], blend_override=0.0)
    assert np.allclose(result.t_final, result.t_refine, atol=1e-6)


def test_blend_override_range(pipeline, sample):
    with pytest.raises(InvalidInputError):
        pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"], blend_override=1.5)


def test_image_without_iuv_is_rejected(pipeline, sample):
    with pytest.raises(InvalidInputError, match="partial texture"):
        pipeline.run(sample["normal"], image=sample["image"])


def test_no_observation_is_rejected(pipeline, sample):
    with pytest.raises(InvalidInputError):
        pipeline.run(sample["normal"])


def test_image_and_iuv_path(pipeline, sample):
    result = pipeline.run(sample["normal"], image=sample["image"], iuv=sample["iuv"])
    # every visible texel of the projected input lies inside the atlas
    assert np.all(result.m_vis[outside(pipeline.context)] == 0.0)
    assert result.m_vis.sum() > 0
    assert np.all(result.t_final[outside(pipeline.context)] == 0.0)


def test_projection_recovers_the_partial_texture(pipeline, sample):
    from_image = pipeline.prepare_input(image=sample["image"], iuv=sample["iuv"])
    from_partial = pipeline.prepare_input(partial=sample["partial"], mask=sample["mask"])
    assert np.array_equal(from_image[2], from_partial[2])
    assert np.abs(from_image[0] - from_partial[0]).max() <= 2.0 / 255.0


def test_occlusion_mask_complements_the_source(pipeline, sample):
    result = pipeline.run(sample["normal"], partial=sample["partial"], mask=sample["mask"], use_refiner=False)
    source = (sample["mask"] > 0.5) & (pipeline.context.m_uv > 0.5)
    assert np.all(result.m_occ[source] == 0.0)
    assert np.all(result.m_occ[(pipeline.context.m_uv > 0.5) & ~source] == 1.0)


def test_wrong_resolution(pipeline, sample):
    with pytest.raises(InvalidInputError):
        pipeline.run(np.zeros((32, 32, 3), dtype=np.float32), partial=sample["partial"], mask=sample["mask"])


def test_infer_writes_intermediates(tmp_path, checkpoints, sample):
    result = infer(sample["normal"], *checkpoints, partial=sample["partial"], mask=sample["mask"], out_dir=str(tmp_path))
    for name in ("t_input", "m_vis", "m_occ", "t_sample", "t_refine", "m_blend", "t_final"):
        assert os.path.exists(tmp_path / f"{name}.png"), name
    written = images.read_texture(str(tmp_path / "t_final.png"))
    assert np.abs(written - result.t_final).max() <= 1.0 / 255.0
