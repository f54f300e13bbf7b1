"""
Training-data selection for the sampler network.

The curriculum advances one step every `iters_per_step` iterations. The step drives the
augmentation strength alpha and, from step 3 on, mixes in partial textures produced by a
dense pose estimator when such fixtures exist.
"""

import os, logging, pydantic, torch
import numpy as np

from typing import Callable, List, Optional, Tuple
from modules.types import TextureMap, Mask, NormalMap, SourceKind, REGION_NAMES, FixtureError
from modules.uvspace import UVContext, mirror_texture, compose_symmetric, mask_ground_truth
from modules.augment import AugmentConfig, alpha_schedule, region_wise_augment
import utils.images as images


logger = logging.getLogger(__name__)

DENSEPOSE_MIN_STEP = 3

MaskSampler = Callable[[np.random.Generator], Mask]


class CurriculumState(pydantic.BaseModel):
    """Immutable snapshot of the curriculum; the training loop replaces it every iteration."""
    model_config = pydantic.ConfigDict(frozen=True)

    iteration: int = pydantic.Field(0, ge=0)
    iters_per_step: int = pydantic.Field(4000, ge=1)
    delta: float = pydantic.Field(0.025, ge=0.0)
    densepose_mix: float = pydantic.Field(0.5, ge=0.0, le=1.0)
    enabled: bool = pydantic.Field(True, description="False bypasses the schedule (fixed alpha, mixing from the start).")
    fixed_alpha: float = pydantic.Field(0.25, ge=0.0, lt=0.5)

    @property
    def step(self) -> int:
        return current_step(self)

    @property
    def alpha(self) -> float:
        return current_alpha(self)

    def advance(self, iterations: int = 1) -> "CurriculumState":
        return self.model_copy(update={"iteration": self.iteration + iterations})


def current_step(state: CurriculumState) -> int:
    return state.iteration // state.iters_per_step


def current_alpha(state: CurriculumState) -> float:
    if not state.enabled:
        return state.fixed_alpha
    return alpha_schedule(current_step(state), state.delta)


def select_source(state: CurriculumState, rng: np.random.Generator, has_densepose_fixtures: bool) -> SourceKind:
    """Augment before step 3; afterwards DensePose fixtures with probability densepose_mix, if any exist."""
    if state.enabled and current_step(state) < DENSEPOSE_MIN_STEP:
        return "augment"
    if not has_densepose_fixtures:
        return "augment"
    return "densepose" if rng.uniform() < state.densepose_mix else "augment"


class ExamplePlan(pydantic.BaseModel):
    source: SourceKind
    augment: bool


def plan_example(
    state: CurriculumState,
    rng: np.random.Generator,
    has_densepose_fixtures: bool,
    p_aug: float,
) -> ExamplePlan:
    source = select_source(state, rng, has_densepose_fixtures)
    augment = source == "augment" and bool(rng.uniform() < p_aug)
    return ExamplePlan(source=source, augment=augment)


# Visibility masks

class VisibilityMaskSampler:
    """
    Synthesizes M_source by deciding per region whether it is fully visible, hidden,
    or cut by a random half-plane. Stands in for rendering a posed body from a random view.
    """
    def __init__(self, context: UVContext, p_visible: float = 0.3, p_hidden: float = 0.2):
        self.context = context
        self.p_visible = p_visible
        self.p_hidden = p_hidden
        rows, cols = np.mgrid[0:context.resolution, 0:context.resolution]
        self._coords = np.stack((cols, rows), axis=-1).astype(np.float64)

    def _half_plane_score(self, region: str, rng: np.random.Generator) -> np.ndarray:
        """Signed distance (in bbox units) to a random line through the region bbox."""
        bbox = self.context.partition.bboxes[region]  # type: ignore
        assert bbox is not None
        y0, x0, y1, x1 = bbox
        centre = np.array([(x0 + x1) / 2.0, (y0 + y1) / 2.0])
        scale = max(y1 - y0, x1 - x0)
        theta = rng.uniform(0.0, 2.0 * np.pi)
        normal = np.array([np.cos(theta), np.sin(theta)])
        offset = rng.uniform(-0.3, 0.3)
        return ((self._coords - centre) @ normal) / scale + offset

    def __call__(self, rng: np.random.Generator) -> Mask:
        mask = np.zeros((self.context.resolution,) * 2, dtype=np.float32)
        for region in REGION_NAMES:
            region_mask = self.context.partition.masks[region]
            if self.context.partition.bboxes[region] is None:
                continue
            draw = rng.uniform()
            if draw < self.p_visible:
                visible = region_mask > 0
            elif draw < self.p_visible + self.p_hidden:
                continue
            else:
                visible = (self._half_plane_score(region, rng) > 0) & (region_mask > 0)
            mask[visible] = 1.0
        return mask

    def with_coverage(self, rng: np.random.Generator, coverage: float) -> Mask:
        """A mask whose visible share of M_uv is `coverage` (up to ties)."""
        score = np.zeros((self.context.resolution,) * 2)
        for region in REGION_NAMES:
            if self.context.partition.bboxes[region] is None:
                continue
            inside = self.context.partition.masks[region] > 0
            score[inside] = self._half_plane_score(region, rng)[inside] + rng.uniform(-0.5, 0.5)
        valid = self.context.m_uv > 0
        if coverage >= 1.0:
            return valid.astype(np.float32)
        threshold = np.quantile(score[valid], 1.0 - coverage)
        return ((score > threshold) & valid).astype(np.float32)


# Examples

class TrainingExample(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    t_input: TextureMap
    m_vis: Mask
    m_source: Mask
    normal: NormalMap
    t_gt: TextureMap
    source: SourceKind
    augmented: bool


def make_training_example(
    t_gt: TextureMap,
    mask_sampler: MaskSampler,
    normal_fixture: Optional[NormalMap],
    state: CurriculumState,
    rng: np.random.Generator,
    *,
    context: UVContext,
    augment_config: Optional[AugmentConfig] = None,
    densepose_fixture: Optional[Tuple[TextureMap, Mask]] = None,
    sample_id: str = "",
) -> TrainingExample:
    """
    Builds (T_input, M_vis, normal, T_GT): masked ground truth or DensePose partial texture,
    optionally augmented, then mirrored and composed symmetrically.
    """
    augment_config = augment_config or AugmentConfig()
    if normal_fixture is None:
        raise FixtureError(f"No normal map for sample '{sample_id}'.")

    plan = plan_example(state, rng, densepose_fixture is not None, augment_config.p_aug)

    if plan.source == "densepose":
        if densepose_fixture is None:
            raise FixtureError(f"No DensePose partial texture for sample '{sample_id}'.")
        t_src, m_src = densepose_fixture
        m_src = m_src * context.m_uv
        t_src = mask_ground_truth(t_src, m_src)
    else:
        m_src = mask_sampler(rng) * context.m_uv
        t_src = mask_ground_truth(t_gt, m_src)
        if plan.augment:
            # warp the visibility mask together with the colors
            stacked = np.concatenate((t_src, m_src[..., None]), axis=-1)
            warped = region_wise_augment(
                stacked, context.partition, context.m_uv, current_alpha(state), rng, augment_config
            )
            m_src = (warped[..., 3] > 0.5).astype(np.float32)
            t_src = mask_ground_truth(warped[..., :3], m_src)

    t_mirror, m_mirror = mirror_texture(t_src, m_src, context.table)
    t_input = compose_symmetric(t_src, m_src, t_mirror)
    m_vis = np.maximum(m_src, m_mirror * context.m_uv)

    return TrainingExample(
        sample_id=sample_id,
        t_input=t_input,
        m_vis=m_vis.astype(np.float32),
        m_source=m_src.astype(np.float32),
        normal=normal_fixture,
        t_gt=t_gt,
        source=plan.source,
        augmented=plan.augment,
    )


class TrainingBatch(pydantic.BaseModel):
    """NCHW tensors: textures/normals (B,3,H,W), masks (B,1,H,W)."""
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    sample_ids: List[str]
    t_input: torch.Tensor
    m_vis: torch.Tensor
    m_source: torch.Tensor
    normal: torch.Tensor
    t_gt: torch.Tensor
    sources: List[SourceKind]
    augmented: List[bool]

    def to(self, device: torch.device | str) -> "TrainingBatch":
        return self.model_copy(update={
            name: getattr(self, name).to(device)
            for name in ("t_input", "m_vis", "m_source", "normal", "t_gt")
        })


def to_tensor(array: np.ndarray) -> torch.Tensor:
    """H x W (x C) array -> C x H x W float tensor."""
    if array.ndim == 2:
        array = array[..., None]
    return torch.from_numpy(np.ascontiguousarray(array, dtype=np.float32)).permute(2, 0, 1)


def to_array(tensor: torch.Tensor) -> np.ndarray:
    """C x H x W tensor -> H x W x C float32 array (H x W for one channel)."""
    array = tensor.detach().cpu().permute(1, 2, 0).numpy().astype(np.float32)
    return array[..., 0] if array.shape[-1] == 1 else array


def collate_examples(examples: List[TrainingExample]) -> TrainingBatch:
    return TrainingBatch(
        sample_ids=[e.sample_id for e in examples],
        t_input=torch.stack([to_tensor(e.t_input) for e in examples]),
        m_vis=torch.stack([to_tensor(e.m_vis) for e in examples]),
        m_source=torch.stack([to_tensor(e.m_source) for e in examples]),
        normal=torch.stack([to_tensor(e.normal) for e in examples]),
        t_gt=torch.stack([to_tensor(e.t_gt) for e in examples]),
        sources=[e.source for e in examples],
        augmented=[e.augmented for e in examples],
    )


# Fixtures

class FixtureSample(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(arbitrary_types_allowed=True)

    sample_id: str
    texture: TextureMap
    normal: NormalMap
    densepose: Optional[Tuple[TextureMap, Mask]] = None


class FixtureDataset:
    """
    Immutable in-memory view of a fixture root:
        textures/<id>.png, normals/<id>.png,
        optional densepose/<id>.png + densepose/<id>_mask.png.
    Enumeration order is the sorted list of texture filenames.
    """
    def __init__(self, root: str, context: UVContext):
        self.root = root
        self.context = context
        texture_dir = os.path.join(root, "textures")
        if not os.path.isdir(texture_dir):
            raise FixtureError(f"Fixture root '{root}' has no textures/ directory.")

        ids = sorted(os.path.splitext(name)[0] for name in os.listdir(texture_dir) if name.endswith(".png"))
        if not ids:
            raise FixtureError(f"No textures found in '{texture_dir}'.")

        self.samples: List[FixtureSample] = [self._load(sample_id) for sample_id in ids]
        self.mask_sampler = VisibilityMaskSampler(context)
        logger.info(
            "Loaded %d fixtures from %s (%d with DensePose partial textures)",
            len(self.samples), root, sum(s.densepose is not None for s in self.samples),
        )

    def _load(self, sample_id: str) -> FixtureSample:
        path = lambda *parts: os.path.join(self.root, *parts)

        texture = images.read_texture(path("textures", f"{sample_id}.png"))
        if texture.shape[:2] != (self.context.resolution, self.context.resolution):
            raise FixtureError(
                f"Texture '{sample_id}' is {texture.shape[:2]}, expected {self.context.resolution}^2."
            )
        normal = images.read_normal(path("normals", f"{sample_id}.png"))

        densepose = None
        if os.path.exists(path("densepose", f"{sample_id}.png")):
            densepose = (
                images.read_texture(path("densepose", f"{sample_id}.png")),
                (images.read_mask(path("densepose", f"{sample_id}_mask.png")) > 0.5).astype(np.float32),
            )

        return FixtureSample(sample_id=sample_id, texture=texture, normal=normal, densepose=densepose)

    def __len__(self) -> int:
        return len(self.samples)

    def make_example(
        self,
        index: int,
        state: CurriculumState,
        rng: np.random.Generator,
        augment_config: Optional[AugmentConfig] = None,
    ) -> TrainingExample:
        sample = self.samples[index]
        return make_training_example(
            sample.texture,
            self.mask_sampler,
            sample.normal,
            state,
            rng,
            context=self.context,
            augment_config=augment_config,
            densepose_fixture=sample.densepose,
            sample_id=sample.sample_id,
        )

