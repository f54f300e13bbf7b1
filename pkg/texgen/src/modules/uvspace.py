"""
UV-space geometry: the part atlas, projection of an image into UV space,
left/right mirroring, symmetric composition, masking and region partitioning.

Every function here is pure: inputs are never mutated.
"""

import os, pydantic
import numpy as np

from typing import Dict, List, Literal, Optional, Tuple
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self
from modules.types import (
    TextureMap, Mask, RegionName, REGION_NAMES,
    InvalidInputError, ConfigurationError,
)


NUM_PARTS = 24
DEFAULT_RESOLUTION = 256
DEFAULT_ATLAS_PATH = os.path.join(os.path.dirname(os.path.dirname(__file__)), "data", "atlas.json")

BBox = Tuple[int, int, int, int]  # (y0, x0, y1, x1), end-exclusive


class AtlasPart(pydantic.BaseModel):
    index: int = pydantic.Field(..., ge=1, le=NUM_PARTS)
    name: str
    row: int = pydantic.Field(..., ge=0)
    col: int = pydantic.Field(..., ge=0)
    region: Optional[RegionName] = pydantic.Field(None, description="Region group used by augmentation and loss weights.")
    mirror: int = pydantic.Field(..., ge=1, le=NUM_PARTS, description="Index of the left/right counterpart.")
    flip: Literal["u", "v"] = "u"


class MirrorTable(pydantic.BaseModel):
    """
    Part index -> mirrored part index, with the axis reflected inside the part rectangle.
    Carries the atlas cell layout so that it can be applied to a texture on its own.
    """
    pairs: Dict[int, int]
    flip: Dict[int, Literal["u", "v"]]
    cells: Dict[int, Tuple[int, int]]  # part -> (row, col)
    rows: int
    cols: int

    @pydantic.model_validator(mode="after")
    def _check_involution(self) -> Self:
        for part, other in self.pairs.items():
            if self.pairs.get(other) != part:
                raise ValueError(f"Mirror table is not involutive: {part} -> {other} -> {self.pairs.get(other)}")
            if self.flip[part] != self.flip[other]:
                raise ValueError(f"Parts {part} and {other} disagree on the flip axis.")
        return self


class Atlas(pydantic.BaseModel):
    """
    Fixed layout of the 24 body parts as a rows x cols grid of equal cells in the UV square.
    Texels right/below the last full cell are outside every part (and outside M_uv).
    """
    version: int = 1
    rows: int = 4
    cols: int = 6
    region_weights: Dict[RegionName, float]
    parts: List[AtlasPart]

    @pydantic.model_validator(mode="after")
    def _check_layout(self) -> Self:
        indices = sorted(p.index for p in self.parts)
        if indices != list(range(1, NUM_PARTS + 1)):
            raise ValueError(f"Atlas must list parts 1..{NUM_PARTS} exactly once, got {indices}")
        cells = [(p.row, p.col) for p in self.parts]
        if len(set(cells)) != len(cells):
            raise ValueError("Two parts share the same atlas cell.")
        if any(p.row >= self.rows or p.col >= self.cols for p in self.parts):
            raise ValueError("A part is placed outside the atlas grid.")
        return self

    @classmethod
    def load(cls, path: str = DEFAULT_ATLAS_PATH) -> "Atlas":
        with open(path, "r", encoding="utf-8") as f:
            return cls.model_validate_json(f.read())

    def part(self, index: int) -> AtlasPart:
        for p in self.parts:
            if p.index == index:
                return p
        raise KeyError(index)

    def cell_size(self, resolution: int) -> Tuple[int, int]:
        return resolution // self.rows, resolution // self.cols

    def part_rect(self, index: int, resolution: int) -> BBox:
        ch, cw = self.cell_size(resolution)
        p = self.part(index)
        return p.row * ch, p.col * cw, (p.row + 1) * ch, (p.col + 1) * cw

    def part_labels(self, resolution: int) -> np.ndarray:
        """H x W int map of the part index owning each texel (0 outside every part)."""
        labels = np.zeros((resolution, resolution), dtype=np.int64)
        for p in self.parts:
            y0, x0, y1, x1 = self.part_rect(p.index, resolution)
            labels[y0:y1, x0:x1] = p.index
        return labels

    def uv_mask(self, resolution: int = DEFAULT_RESOLUTION) -> Mask:
        """M_uv: 1 on every texel that belongs to a part."""
        return (self.part_labels(resolution) > 0).astype(np.float32)

    def mirror_table(self) -> MirrorTable:
        return MirrorTable(
            pairs={p.index: p.mirror for p in self.parts},
            flip={p.index: p.flip for p in self.parts},
            cells={p.index: (p.row, p.col) for p in self.parts},
            rows=self.rows,
            cols=self.cols,
        )


class IUVMap(pydantic.BaseModel):
    """Per image pixel (part index, u, v). (u, v) are only meaningful where part > 0."""
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    parts: np.ndarray
    u: np.ndarray
    v: np.ndarray

    @pydantic.model_validator(mode="after")
    def _check_shapes(self) -> Self:
        if self.parts.ndim != 2 or self.parts.shape != self.u.shape or self.parts.shape != self.v.shape:
            raise ValueError(f"IUV channels disagree: {self.parts.shape}, {self.u.shape}, {self.v.shape}")
        return self

    @property
    def shape(self) -> Tuple[int, int]:
        return self.parts.shape  # type: ignore

    def check_range(self):
        if self.parts.size and (self.parts.min() < 0 or self.parts.max() > NUM_PARTS):
            raise InvalidInputError(
                f"IUV part index out of range [0, {NUM_PARTS}]: found [{self.parts.min()}, {self.parts.max()}]"
            )


class RegionPartition(pydantic.BaseModel):
    """Six disjoint binary region masks covering M_uv, with their loss weights and tight bounding boxes."""
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    masks: Dict[RegionName, np.ndarray]
    weights: Dict[RegionName, float]
    bboxes: Dict[RegionName, Optional[BBox]]


# Projection

def _texel_addresses(iuv: IUVMap, atlas: Atlas, resolution: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Returns (pixel ys, pixel xs, flat texel index) for every foreground pixel."""
    ys, xs = np.nonzero(iuv.parts > 0)
    parts = iuv.parts[ys, xs].astype(np.int64)

    ch, cw = atlas.cell_size(resolution)
    origins = np.zeros((NUM_PARTS + 1, 2), dtype=np.int64)
    for p in atlas.parts:
        origins[p.index] = (p.row * ch, p.col * cw)

    # Nearest texel: texel centres sit at (k + 0.5) / size
    cols = np.clip(np.floor(iuv.u[ys, xs] * cw), 0, cw - 1).astype(np.int64)
    rows = np.clip(np.floor(iuv.v[ys, xs] * ch), 0, ch - 1).astype(np.int64)
    ty = origins[parts, 0] + rows
    tx = origins[parts, 1] + cols
    return ys, xs, ty * resolution + tx


def project_to_uv(
    image: np.ndarray,
    iuv: IUVMap,
    atlas: Atlas,
    resolution: int = DEFAULT_RESOLUTION,
) -> Tuple[TextureMap, Mask]:
    """
    Map the foreground pixels of an image into the UV square.
    Colliding writes are averaged; the mask is 1 exactly at written texels.
    """
    if image.ndim != 3 or image.shape[:2] != iuv.shape:
        raise InvalidInputError(f"Image {image.shape} and IUV {iuv.shape} resolutions differ.")
    iuv.check_range()

    ys, xs, flat = _texel_addresses(iuv, atlas, resolution)
    channels = image.shape[2]

    sums = np.zeros((resolution * resolution, channels), dtype=np.float64)
    np.add.at(sums, flat, image[ys, xs].astype(np.float64))
    counts = np.bincount(flat, minlength=resolution * resolution).astype(np.float64)

    texture = sums / np.maximum(counts, 1.0)[:, None]
    texture = texture.reshape(resolution, resolution, channels).astype(np.float32)
    mask = (counts > 0).reshape(resolution, resolution).astype(np.float32)
    return texture, mask


def render_from_uv(texture: TextureMap, iuv: IUVMap, atlas: Atlas) -> np.ndarray:
    """Inverse lookup of project_to_uv: each foreground pixel reads the texel it addresses."""
    iuv.check_range()
    resolution = texture.shape[0]
    ys, xs, flat = _texel_addresses(iuv, atlas, resolution)
    image = np.zeros(iuv.shape + (texture.shape[2],), dtype=np.float32)
    image[ys, xs] = texture.reshape(-1, texture.shape[2])[flat]
    return image


def exhaustive_iuv(atlas: Atlas, resolution: int = DEFAULT_RESOLUTION) -> IUVMap:
    """
    A resolution x resolution IUV image laid out like the atlas itself,
    so that every texel of every part is addressed exactly once.
    """
    ch, cw = atlas.cell_size(resolution)
    parts = atlas.part_labels(resolution)
    rows, cols = np.mgrid[0:resolution, 0:resolution]
    u = ((cols % cw) + 0.5) / cw
    v = ((rows % ch) + 0.5) / ch
    fg = parts > 0
    return IUVMap(
        parts=parts,
        u=np.where(fg, u, 0.0).astype(np.float32),
        v=np.where(fg, v, 0.0).astype(np.float32),
    )


# Mirroring and composition

def mirror_texture(t: TextureMap, m: Mask, table: MirrorTable) -> Tuple[TextureMap, Mask]:
    """
    Copy every part into its mirrored part's rectangle, reflected along the part's flip axis.
    Texels outside the atlas cells are left as they are.
    """
    resolution = t.shape[0]
    ch, cw = resolution // table.rows, resolution // table.cols
    t_out, m_out = t.copy(), m.copy()

    for part, other in table.pairs.items():
        sr, sc = table.cells[part]
        dr, dc = table.cells[other]
        src_t = t[sr * ch:(sr + 1) * ch, sc * cw:(sc + 1) * cw]
        src_m = m[sr * ch:(sr + 1) * ch, sc * cw:(sc + 1) * cw]
        axis = 1 if table.flip[part] == "u" else 0
        t_out[dr * ch:(dr + 1) * ch, dc * cw:(dc + 1) * cw] = np.flip(src_t, axis=axis)
        m_out[dr * ch:(dr + 1) * ch, dc * cw:(dc + 1) * cw] = np.flip(src_m, axis=axis)

    return t_out, m_out


def compose_symmetric(t_src: TextureMap, m_src: Mask, t_mirror: TextureMap) -> TextureMap:
    """T_input = T_source + T_mirror * (1 - M_source)."""
    return (t_src + t_mirror * (1.0 - m_src)[..., None]).astype(np.float32)


def mask_ground_truth(t_gt: TextureMap, m_src: Mask) -> TextureMap:
    """T_GT^M = T_GT * M_source."""
    return (t_gt * m_src[..., None]).astype(np.float32)


def occlusion_mask(m_uv: Mask, m_src: Mask) -> Mask:
    """Texels valid on the body model but not observed: max(M_uv - M_src, 0)."""
    return np.maximum(m_uv - m_src, 0.0).astype(np.float32)


# Regions

def _tight_bbox(mask: np.ndarray) -> Optional[BBox]:
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return None
    return int(ys.min()), int(xs.min()), int(ys.max()) + 1, int(xs.max()) + 1


def build_region_partition(m_uv: Mask, atlas: Atlas) -> RegionPartition:
    """Split M_uv into the six region masks (head, body, legs, arms, feet, hands)."""
    unassigned = [p.index for p in atlas.parts if p.region is None]
    if unassigned:
        raise ConfigurationError(f"Atlas parts {unassigned} are not assigned to any region.")

    labels = atlas.part_labels(m_uv.shape[0])
    valid = m_uv > 0
    masks: Dict[RegionName, np.ndarray] = {}
    bboxes: Dict[RegionName, Optional[BBox]] = {}

    for region in REGION_NAMES:
        members = [p.index for p in atlas.parts if p.region == region]
        mask = np.isin(labels, members) & valid
        masks[region] = mask.astype(np.float32)
        bboxes[region] = _tight_bbox(mask)

    return RegionPartition(
        masks=masks,
        weights={region: float(atlas.region_weights.get(region, 1.0)) for region in REGION_NAMES},
        bboxes=bboxes,
    )


class UVContext(pydantic.BaseModel):
    """Atlas-derived constants at one resolution, computed once and shared read-only."""
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    atlas: Atlas
    resolution: int
    table: MirrorTable
    m_uv: np.ndarray
    partition: RegionPartition

    @classmethod
    def build(cls, atlas: Atlas, resolution: int = DEFAULT_RESOLUTION) -> "UVContext":
        m_uv = atlas.uv_mask(resolution)
        return cls(
            atlas=atlas,
            resolution=resolution,
            table=atlas.mirror_table(),
            m_uv=m_uv,
            partition=build_region_partition(m_uv, atlas),
        )
