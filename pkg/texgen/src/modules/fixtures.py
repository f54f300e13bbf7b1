"""
Procedural fixture sets standing in for rendered scans.

Layout under the output directory (all PNG):
    textures/<id>.png          full ground-truth texture (zero outside M_uv)
    masks/<id>.png             visibility mask M_source (subset of M_uv)
    masks_<pct>/<id>.png       extra masks at a fixed visible fraction (coverage sweeps)
    normals/<id>.png           unit normal field encoded as (n + 1) / 2
    iuv/<id>.png               16-bit IUV addressing exactly the visible texels
    images/<id>.png            "photo" rendered through that IUV map
    partial/<id>.png           T_source = texture * mask
    densepose/<id>.png (+ _mask.png)  misaligned partial textures, for the first `densepose_count` ids
    manifest.json
"""

import os, asyncio, logging, pydantic, cv2
import numpy as np

from typing import Dict, List, Optional
from modules.types import TextureMap, NormalMap, REGION_NAMES
from modules.uvspace import Atlas, UVContext, IUVMap, exhaustive_iuv, render_from_uv, mask_ground_truth
from modules.augment import AugmentConfig, region_wise_augment
from modules.curriculum import VisibilityMaskSampler
from utils.jsondb import JsonDB
import utils.images as images


logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class FixtureSpec(pydantic.BaseModel):
    count: int = pydantic.Field(10, ge=1, description="Number of textures to generate.")
    resolution: int = pydantic.Field(256, ge=32)
    seed: int = 0
    densepose_count: int = pydantic.Field(0, ge=0, description="Samples that also get a misaligned partial texture.")
    densepose_alpha: float = pydantic.Field(0.2, ge=0.0, lt=0.5, description="Warp strength emulating pose-estimation error.")
    coverage_levels: List[float] = pydantic.Field(default_factory=list, description="Visible fractions for extra mask sets.")

    @pydantic.field_validator("coverage_levels")
    @classmethod
    def _check_levels(cls, levels: List[float]) -> List[float]:
        for level in levels:
            if not 0.0 < level <= 1.0:
                raise ValueError(f"coverage levels must be in (0,1], got {level}")
        return levels


class ManifestEntry(pydantic.BaseModel):
    sample_id: str
    roles: Dict[str, str] = pydantic.Field(default_factory=dict, description="Fixture role -> path relative to the root.")


class FixtureManifest(pydantic.BaseModel):
    version: int = MANIFEST_VERSION
    resolution: int = 0
    seed: int = 0
    samples: List[ManifestEntry] = pydantic.Field(default_factory=list)


def coverage_dir(level: float) -> str:
    return f"masks_{int(round(level * 100)):02d}"


# Procedural content

def procedural_texture(context: UVContext, rng: np.random.Generator) -> TextureMap:
    """Per-region base colors with stripes, color blocks and small high-frequency 'logo' patches."""
    res = context.resolution
    texture = np.zeros((res, res, 3), dtype=np.float32)
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float32) / res

    for region in REGION_NAMES:
        mask = context.partition.masks[region] > 0
        if not mask.any():
            continue
        base = rng.uniform(0.15, 0.85, size=3).astype(np.float32)
        layer = np.broadcast_to(base, (res, res, 3)).copy()

        if rng.uniform() < 0.7:
            angle = rng.uniform(0.0, np.pi)
            frequency = rng.uniform(4.0, 16.0)
            stripes = np.sin(2.0 * np.pi * frequency * (np.cos(angle) * xs + np.sin(angle) * ys)) > 0
            layer[stripes] = rng.uniform(0.0, 1.0, size=3)

        bbox = context.partition.bboxes[region]
        for _ in range(rng.integers(1, 4)):
            y0, x0, y1, x1 = bbox
            h, w = rng.integers(2, max((y1 - y0) // 2, 3)), rng.integers(2, max((x1 - x0) // 2, 3))
            by, bx = rng.integers(y0, max(y1 - h, y0 + 1)), rng.integers(x0, max(x1 - w, x0 + 1))
            layer[by:by + h, bx:bx + w] = rng.uniform(0.0, 1.0, size=3)

        if rng.uniform() < 0.5:
            y0, x0, y1, x1 = bbox
            size = max(min(y1 - y0, x1 - x0) // 4, 2)
            by, bx = rng.integers(y0, max(y1 - size, y0 + 1)), rng.integers(x0, max(x1 - size, x0 + 1))
            layer[by:by + size, bx:bx + size] = rng.uniform(0.0, 1.0, size=(size, size, 3)).astype(np.float32)

        texture[mask] = layer[mask]

    return texture * context.m_uv[..., None]


def procedural_normals(context: UVContext, rng: np.random.Generator) -> NormalMap:
    """Smoothly varying unit normals: a few low-frequency sinusoids tilting +z, encoded as (n + 1) / 2."""
    res = context.resolution
    ys, xs = np.mgrid[0:res, 0:res].astype(np.float32) / res
    field = np.zeros((res, res, 3), dtype=np.float32)
    field[..., 2] = 1.0
    for axis in range(2):
        for _ in range(3):
            fx, fy, phase = rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.0, 2.0 * np.pi)
            field[..., axis] += 0.3 * np.sin(2.0 * np.pi * (fx * xs + fy * ys) + phase)
    field /= np.linalg.norm(field, axis=-1, keepdims=True)
    # smooth, then renormalize so the field stays unit length
    field = cv2.GaussianBlur(field, (5, 5), 1.0)
    field /= np.linalg.norm(field, axis=-1, keepdims=True)
    return ((field + 1.0) * 0.5).astype(np.float32)


def visible_iuv(context: UVContext, mask: np.ndarray) -> IUVMap:
    """Exhaustive atlas-layout IUV with every texel outside the mask set to background."""
    full = exhaustive_iuv(context.atlas, context.resolution)
    visible = mask > 0.5
    return IUVMap(
        parts=np.where(visible, full.parts, 0),
        u=np.where(visible, full.u, 0.0).astype(np.float32),
        v=np.where(visible, full.v, 0.0).astype(np.float32),
    )


# Generation

async def write_manifest(path: str, manifest: FixtureManifest):
    async with JsonDB(path, FixtureManifest) as data:
        data.version = manifest.version
        data.resolution = manifest.resolution
        data.seed = manifest.seed
        data.samples = manifest.samples


async def read_manifest(path: str) -> FixtureManifest:
    return await JsonDB(path, FixtureManifest).read()


def generate_fixtures(
    spec: FixtureSpec,
    out_dir: str,
    rng: Optional[np.random.Generator] = None,
    atlas: Optional[Atlas] = None,
) -> FixtureManifest:
    """Writes a fixture set; the same spec and seed always produce byte-identical files."""
    rng = rng if rng is not None else np.random.default_rng(spec.seed)
    context = UVContext.build(atlas or Atlas.load(), spec.resolution)
    mask_sampler = VisibilityMaskSampler(context)
    warp = AugmentConfig(kind="region_tps")
    path = lambda *parts: os.path.join(out_dir, *parts)

    entries: List[ManifestEntry] = []
    for index in range(spec.count):
        sample_id = f"{index:04d}"
        texture = procedural_texture(context, rng)
        normal = procedural_normals(context, rng)
        mask = mask_sampler(rng) * context.m_uv
        iuv = visible_iuv(context, mask)

        roles = {
            "texture": f"textures/{sample_id}.png",
            "mask": f"masks/{sample_id}.png",
            "normal": f"normals/{sample_id}.png",
            "iuv": f"iuv/{sample_id}.png",
            "image": f"images/{sample_id}.png",
            "partial": f"partial/{sample_id}.png",
        }
        images.write_texture(path(roles["texture"]), texture)
        images.write_mask(path(roles["mask"]), mask)
        images.write_normal(path(roles["normal"]), normal)
        images.write_iuv(path(roles["iuv"]), iuv)
        images.write_texture(path(roles["image"]), render_from_uv(texture, iuv, context.atlas))
        images.write_texture(path(roles["partial"]), mask_ground_truth(texture, mask))

        if index < spec.densepose_count:
            stacked = np.concatenate((mask_ground_truth(texture, mask), mask[..., None]), axis=-1)
            warped = region_wise_augment(stacked, context.partition, context.m_uv, spec.densepose_alpha, rng, warp)
            dp_mask = (warped[..., 3] > 0.5).astype(np.float32)
            roles["densepose"] = f"densepose/{sample_id}.png"
            roles["densepose_mask"] = f"densepose/{sample_id}_mask.png"
            images.write_texture(path(roles["densepose"]), mask_ground_truth(warped[..., :3], dp_mask))
            images.write_mask(path(roles["densepose_mask"]), dp_mask)

        for level in spec.coverage_levels:
            key = coverage_dir(level)
            roles[key] = f"{key}/{sample_id}.png"
            images.write_mask(path(roles[key]), mask_sampler.with_coverage(rng, level) * context.m_uv)

        entries.append(ManifestEntry(sample_id=sample_id, roles=roles))

    manifest = FixtureManifest(resolution=spec.resolution, seed=spec.seed, samples=entries)
    asyncio.run(write_manifest(path("manifest.json"), manifest))
    logger.info("Generated %d fixtures at %dx%d in %s", spec.count, spec.resolution, spec.resolution, out_dir)
    return manifest
