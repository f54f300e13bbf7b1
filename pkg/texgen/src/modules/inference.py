"""
End-to-end texture completion from one observation.

    image + IUV --project--> T_source, M_source      (or a partial texture + mask directly)
    mirror + compose       -> T_input, M_vis
    SamplerNet + resample  -> T_sample
    RefinerNet             -> T_refine, M_blend
    blend, mask by M_uv    -> T_final
"""

import os, logging, pydantic, torch
import numpy as np

from typing import Optional
from modules.types import TextureMap, Mask, NormalMap, InvalidInputError
from modules.uvspace import Atlas, IUVMap, UVContext, project_to_uv, mirror_texture, compose_symmetric, occlusion_mask, mask_ground_truth
from modules.curriculum import to_tensor, to_array
from modules.sampler import SamplerNet, grid_sample
from modules.refiner import RefinerNet, blend
from modules.training import load_sampler, load_refiner, resolve_device
import utils.images as images


logger = logging.getLogger(__name__)


class InferConfig(pydantic.BaseModel):
    """Checkpoints and switches for one `infer` call; loaded from a flat config file plus overrides."""
    sampler: Optional[str] = pydantic.Field(default=None, description="Sampler checkpoint.")
    refiner: Optional[str] = pydantic.Field(default=None, description="Refiner checkpoint; omitted means sampler-only completion.")
    device: str = pydantic.Field(default="cpu", description="Torch device, or \"auto\".")
    use_refiner: bool = True
    blend_override: Optional[float] = pydantic.Field(default=None, ge=0.0, le=1.0, description="Constant blend mask instead of the predicted one.")


class InferenceResult(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    t_input: TextureMap
    m_vis: Mask
    m_occ: Mask
    t_sample: TextureMap
    t_refine: Optional[TextureMap] = None
    m_blend: Optional[Mask] = None
    t_final: TextureMap

    def write(self, out_dir: str):
        """Writes every intermediate as PNG into out_dir."""
        images.write_texture(os.path.join(out_dir, "t_input.png"), self.t_input)
        images.write_mask(os.path.join(out_dir, "m_vis.png"), self.m_vis)
        images.write_mask(os.path.join(out_dir, "m_occ.png"), self.m_occ)
        images.write_texture(os.path.join(out_dir, "t_sample.png"), self.t_sample)
        if self.t_refine is not None:
            images.write_texture(os.path.join(out_dir, "t_refine.png"), self.t_refine)
        if self.m_blend is not None:
            images.write_mask(os.path.join(out_dir, "m_blend.png"), self.m_blend)
        images.write_texture(os.path.join(out_dir, "t_final.png"), self.t_final)


class TexturePipeline:
    def __init__(self, sampler: SamplerNet, refiner: Optional[RefinerNet], context: UVContext, device: str | torch.device = "cpu"):
        if refiner is not None and refiner.config.resolution != sampler.config.resolution:
            raise InvalidInputError(
                f"Sampler ({sampler.config.resolution}) and refiner ({refiner.config.resolution}) resolutions differ."
            )
        self.device = torch.device(device)
        self.sampler = sampler.to(self.device).eval()
        self.refiner = refiner.to(self.device).eval() if refiner is not None else None
        self.context = context

    @classmethod
    def from_checkpoints(
        cls,
        sampler_checkpoint: str,
        refiner_checkpoint: Optional[str] = None,
        atlas: Optional[Atlas] = None,
        device: str = "cpu",
    ) -> "TexturePipeline":
        device = resolve_device(device)
        sampler, _ = load_sampler(sampler_checkpoint, device)
        refiner = load_refiner(refiner_checkpoint, device)[0] if refiner_checkpoint else None
        context = UVContext.build(atlas or Atlas.load(), sampler.config.resolution)
        return cls(sampler, refiner, context, device)

    def prepare_input(
        self,
        *,
        image: Optional[np.ndarray] = None,
        iuv: Optional[IUVMap] = None,
        partial: Optional[TextureMap] = None,
        mask: Optional[Mask] = None,
    ):
        """Returns (T_input, M_vis, M_source) from a photo + IUV or from a partial texture + mask."""
        resolution = self.context.resolution
        if image is not None:
            if iuv is None:
                raise InvalidInputError(
                    "An IUV map is required to project an image; without one, pass a partial texture and its mask instead."
                )
            t_src, m_src = project_to_uv(image, iuv, self.context.atlas, resolution)
        elif partial is not None and mask is not None:
            if partial.shape[:2] != (resolution, resolution) or mask.shape[:2] != (resolution, resolution):
                raise InvalidInputError(
                    f"Partial texture {partial.shape} and mask {mask.shape} must be {resolution}x{resolution}."
                )
            m_src = (mask > 0.5).astype(np.float32)
            t_src = mask_ground_truth(partial, m_src)
        else:
            raise InvalidInputError("Provide either an image with its IUV map, or a partial texture with its mask.")

        m_src = m_src * self.context.m_uv
        t_src = mask_ground_truth(t_src, m_src)
        t_mirror, m_mirror = mirror_texture(t_src, m_src, self.context.table)
        t_input = compose_symmetric(t_src, m_src, t_mirror)
        m_vis = np.maximum(m_src, m_mirror * self.context.m_uv).astype(np.float32)
        return t_input, m_vis, m_src

    @torch.no_grad()
    def run(
        self,
        normal: NormalMap,
        *,
        image: Optional[np.ndarray] = None,
        iuv: Optional[IUVMap] = None,
        partial: Optional[TextureMap] = None,
        mask: Optional[Mask] = None,
        use_refiner: bool = True,
        blend_override: Optional[float] = None,
    ) -> InferenceResult:
        """
        use_refiner=False returns T_sample as the final texture.
        blend_override replaces M_blend by a constant (1.0 keeps T_sample, 0.0 keeps T_refine).
        """
        if blend_override is not None and not 0.0 <= blend_override <= 1.0:
            raise InvalidInputError(f"blend_override must be in [0,1], got {blend_override}")
        resolution = self.context.resolution
        if normal.shape[:2] != (resolution, resolution):
            raise InvalidInputError(f"Normal map {normal.shape} must be {resolution}x{resolution}.")

        t_input, m_vis, m_src = self.prepare_input(image=image, iuv=iuv, partial=partial, mask=mask)
        m_uv = self.context.m_uv[..., None]
        m_occ = occlusion_mask(self.context.m_uv, m_src)

        batch = lambda array: to_tensor(array).unsqueeze(0).to(self.device)
        t_input_t = batch(t_input)
        grid = self.sampler(t_input_t, batch(m_vis), batch(normal))
        t_sample_t = grid_sample(t_input_t, grid)
        t_sample = to_array(t_sample_t[0]) * m_uv

        if not use_refiner or self.refiner is None:
            if use_refiner:
                logger.warning("No refiner loaded; returning the sampled texture.")
            return InferenceResult(t_input=t_input, m_vis=m_vis, m_occ=m_occ, t_sample=t_sample, t_final=t_sample)

        t_refine_t, m_blend_t = self.refiner(t_sample_t, batch(m_occ))
        if blend_override is not None:
            m_blend_t = torch.full_like(m_blend_t, blend_override)
        t_final_t = blend(t_sample_t, t_refine_t, m_blend_t)

        return InferenceResult(
            t_input=t_input,
            m_vis=m_vis,
            m_occ=m_occ,
            t_sample=t_sample,
            t_refine=to_array(t_refine_t[0]) * m_uv,
            m_blend=to_array(m_blend_t[0]),
            t_final=np.clip(to_array(t_final_t[0]), 0.0, 1.0) * m_uv,
        )


def infer(
    normal: NormalMap,
    sampler_checkpoint: str,
    refiner_checkpoint: Optional[str] = None,
    *,
    image: Optional[np.ndarray] = None,
    iuv: Optional[IUVMap] = None,
    partial: Optional[TextureMap] = None,
    mask: Optional[Mask] = None,
    use_refiner: bool = True,
    blend_override: Optional[float] = None,
    out_dir: Optional[str] = None,
    device: str = "cpu",
) -> InferenceResult:
    pipeline = TexturePipeline.from_checkpoints(sampler_checkpoint, refiner_checkpoint, device=device)
    result = pipeline.run(
        normal, image=image, iuv=iuv, partial=partial, mask=mask, use_refiner=use_refiner, blend_override=blend_override
    )
    if out_dir:
        result.write(out_dir)
        logger.info("Wrote intermediates to %s", out_dir)
    return result
