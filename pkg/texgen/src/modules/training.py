"""
Two-phase training: SamplerNet under the curriculum first, then RefinerNet against the frozen sampler.

Both loops write a newline-delimited JSON loss log, periodic checkpoints and a run registry entry
per checkpoint. A non-finite loss aborts the run with the offending batch dumped next to the log.
"""

import os, json, asyncio, hashlib, logging, pydantic, torch
import numpy as np

from concurrent.futures import ThreadPoolExecutor
from typing import Any, Dict, List, Literal, Optional, Tuple
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self
from modules.types import LossRecord, NonFiniteLossError, CheckpointVersionError, ConfigurationError
from modules.uvspace import Atlas, UVContext, DEFAULT_ATLAS_PATH
from modules.augment import AugmentConfig, AugmentKind, draw_color_jitter, apply_color_jitter
from modules.curriculum import CurriculumState, FixtureDataset, TrainingBatch, TrainingExample, collate_examples
from modules.perceptual import build_extractor, PerceptualFeatureExtractor
from modules.sampler import SamplerConfig, SamplerNet, grid_sample, region_weight_map, sampler_loss
from modules.refiner import (
    RefinerConfig, RefinerNet, PatchDiscriminator, LossWeights, PerceptualTapSchedule, RefinerLossComponents,
    blend, refiner_recon_loss, tapped_perceptual_loss, discriminator_loss, generator_adversarial_loss,
    feature_matching_loss, refiner_total_loss,
)
from utils.jsondb import JsonDB


logger = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "texgen-checkpoint"
CHECKPOINT_VERSION = 1

CheckpointKind = Literal["sampler", "refiner"]


class TrainConfig(pydantic.BaseModel):
    # Optimization
    lr: float = pydantic.Field(2e-4, gt=0.0, description="Adam learning rate.")
    betas: Tuple[float, float] = pydantic.Field((0.9, 0.999), description="Adam moment coefficients.")
    batch_size: int = pydantic.Field(8, ge=1)
    iterations: int = pydantic.Field(30000, ge=1, description="Iterations of each training phase.")
    loss_reduction: Literal["sum", "mean"] = pydantic.Field("mean", description="Reduction of the L1 loss terms.")

    # Curriculum and augmentation
    p_aug: float = pydantic.Field(0.8, ge=0.0, le=1.0)
    delta: float = pydantic.Field(0.025, ge=0.0)
    iters_per_step: int = pydantic.Field(4000, ge=1)
    densepose_mix: float = pydantic.Field(0.5, ge=0.0, le=1.0)
    curriculum: bool = pydantic.Field(True, description="False trains with a fixed alpha and mixing from iteration 0.")
    augment_kind: AugmentKind = "region_tps"
    fixed_alpha: float = pydantic.Field(0.25, ge=0.0, lt=0.5)
    color_jitter_p: float = pydantic.Field(0.5, ge=0.0, le=1.0, description="Refiner phase color jitter probability.")

    # Data and networks
    seed: int = 0
    fixture_root: str = "fixtures"
    out_dir: str = "runs"
    atlas_path: str = DEFAULT_ATLAS_PATH
    resolution: int = 256
    sampler_channels: int = pydantic.Field(32, ge=1)
    sampler_max_channels: int = pydantic.Field(256, ge=1)
    refiner_channels: int = pydantic.Field(32, ge=1)
    discriminator_channels: int = pydantic.Field(64, ge=1)
    extractor: Literal["random", "vgg19"] = "random"
    extractor_weights: Optional[str] = None
    extractor_width_divisor: int = pydantic.Field(8, ge=1)

    # Bookkeeping
    checkpoint_every: int = pydantic.Field(1000, ge=1)
    log_every: int = pydantic.Field(100, ge=1, description="Iterations between progress log lines.")
    workers: int = pydantic.Field(4, ge=1, description="Threads building training examples.")
    device: str = "cpu"
    deterministic: bool = True

    @pydantic.model_validator(mode="after")
    def _check(self) -> Self:
        if not all(0.0 <= b < 1.0 for b in self.betas):
            raise ValueError(f"betas must be in [0,1), got {self.betas}")
        # raises when the resolution does not suit the networks
        self.sampler_config()
        self.refiner_config()
        return self

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(resolution=self.resolution, base_channels=self.sampler_channels, max_channels=self.sampler_max_channels)

    def refiner_config(self) -> RefinerConfig:
        return RefinerConfig(resolution=self.resolution, base_channels=self.refiner_channels, discriminator_channels=self.discriminator_channels)

    def augment_config(self) -> AugmentConfig:
        return AugmentConfig(kind=self.augment_kind, p_aug=self.p_aug, fixed_alpha=self.fixed_alpha)

    def curriculum_state(self, iteration: int = 0) -> CurriculumState:
        return CurriculumState(
            iteration=iteration,
            iters_per_step=self.iters_per_step,
            delta=self.delta,
            densepose_mix=self.densepose_mix,
            enabled=self.curriculum,
            fixed_alpha=self.fixed_alpha,
        )


# Checkpoints

class CheckpointMeta(pydantic.BaseModel):
    kind: CheckpointKind
    iteration: int = pydantic.Field(..., description="Iterations completed when the checkpoint was written.")
    seed: int
    config: Dict[str, Any] = pydantic.Field(default_factory=dict, description="TrainConfig echo.")


def checkpoint_save(params: Dict[str, Dict[str, Any]], meta: CheckpointMeta, path: str):
    """
    Layout: {"format", "version", "meta": CheckpointMeta dump, "params": {block name: state_dict}}.
    Blocks: "sampler" or "refiner" + "discriminator", plus optimizer states.
    """
    dirpath = os.path.dirname(path)
    if dirpath:
        os.makedirs(dirpath, exist_ok=True)
    torch.save(
        {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, "meta": meta.model_dump(mode="json"), "params": params},
        path,
    )


def checkpoint_load(path: str, map_location: str | torch.device = "cpu") -> Tuple[Dict[str, Dict[str, Any]], CheckpointMeta]:
    if not os.path.exists(path):
        raise FileNotFoundError(f"Checkpoint not found: {path}")
    payload = torch.load(path, map_location=map_location, weights_only=True)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointVersionError(f"{path} is not a texgen checkpoint.")
    if payload.get("version") != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path} has checkpoint version {payload.get('version')}, expected {CHECKPOINT_VERSION}."
        )
    return payload["params"], CheckpointMeta.model_validate(payload["meta"])


def load_sampler(path: str, device: str | torch.device = "cpu") -> Tuple[SamplerNet, CheckpointMeta]:
    params, meta = checkpoint_load(path, device)
    if meta.kind != "sampler":
        raise CheckpointVersionError(f"{path} holds a {meta.kind} checkpoint, expected a sampler.")
    net = SamplerNet(TrainConfig.model_validate(meta.config).sampler_config())
    net.load_state_dict(params["sampler"])
    return net.to(device).eval(), meta


def load_refiner(path: str, device: str | torch.device = "cpu") -> Tuple[RefinerNet, CheckpointMeta]:
    params, meta = checkpoint_load(path, device)
    if meta.kind != "refiner":
        raise CheckpointVersionError(f"{path} holds a {meta.kind} checkpoint, expected a refiner.")
    net = RefinerNet(TrainConfig.model_validate(meta.config).refiner_config())
    net.load_state_dict(params["refiner"])
    return net.to(device).eval(), meta


def parameter_digest(module: torch.nn.Module) -> str:
    digest = hashlib.sha3_256()
    for name, tensor in sorted(module.state_dict().items()):
        digest.update(name.encode("utf-8"))
        digest.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()


# Run registry

class RunEntry(pydantic.BaseModel):
    kind: CheckpointKind
    iteration: int
    path: str
    seed: int
    losses: Dict[str, float] = pydantic.Field(default_factory=dict, description="Loss terms at the checkpoint iteration.")


class RunRegistry(pydantic.BaseModel):
    runs: List[RunEntry] = pydantic.Field(default_factory=list)


def registry_path(out_dir: str) -> str:
    return os.path.join(out_dir, "run_registry.json")


async def register_run(out_dir: str, entry: RunEntry):
    async with JsonDB(registry_path(out_dir), RunRegistry) as registry:
        registry.runs.append(entry)


# Loop plumbing

class LossLog:
    """Newline-delimited LossRecord JSON, flushed per line."""
    def __init__(self, path: str, append: bool = False):
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        self.path = path
        self.file = open(path, "a" if append else "w", encoding="utf-8")

    def write(self, record: LossRecord):
        self.file.write(record.model_dump_json() + "\n")
        self.file.flush()

    def close(self):
        self.file.close()

    def __enter__(self) -> Self:
        return self

    def __exit__(self, *args):
        self.close()


def read_loss_log(path: str) -> List[LossRecord]:
    with open(path, "r", encoding="utf-8") as f:
        return [LossRecord.model_validate_json(line) for line in f if line.strip()]


def seed_everything(seed: int, deterministic: bool = True):
    torch.manual_seed(seed)
    np.random.seed(seed)
    if deterministic:
        torch.use_deterministic_algorithms(True, warn_only=True)
        torch.backends.cudnn.benchmark = False


def resolve_device(name: str) -> torch.device:
    if name == "auto":
        return torch.device("cuda" if torch.cuda.is_available() else "cpu")
    return torch.device(name)


def example_rng(seed: int, iteration: int, index: int) -> np.random.Generator:
    """Per-example generator: independent of thread scheduling, identical across resumed runs."""
    return np.random.default_rng([seed, iteration, index])


def jitter_example(example: TrainingExample, rng: np.random.Generator, config: AugmentConfig, m_uv: np.ndarray) -> TrainingExample:
    """The same brightness/contrast/hue draw applied to the input and the ground truth."""
    brightness, contrast, hue = draw_color_jitter(rng, config)
    return example.model_copy(update={
        "t_input": apply_color_jitter(example.t_input, brightness, contrast, hue) * example.m_vis[..., None],
        "t_gt": apply_color_jitter(example.t_gt, brightness, contrast, hue) * m_uv[..., None],
    })


class BatchBuilder:
    """Draws batches with replacement and builds the examples concurrently on a thread pool."""
    def __init__(self, dataset: FixtureDataset, config: TrainConfig, color_jitter_p: float = 0.0):
        self.dataset = dataset
        self.config = config
        self.augment_config = config.augment_config()
        self.color_jitter_p = color_jitter_p
        self.executor = ThreadPoolExecutor(max_workers=config.workers)

    def _example(self, state: CurriculumState, iteration: int, slot: int, index: int) -> TrainingExample:
        rng = example_rng(self.config.seed, iteration, slot + 1)
        example = self.dataset.make_example(index, state, rng, self.augment_config)
        if self.color_jitter_p > 0 and rng.uniform() < self.color_jitter_p:
            example = jitter_example(example, rng, self.augment_config, self.dataset.context.m_uv)
        return example

    def build(self, state: CurriculumState, iteration: int) -> TrainingBatch:
        picks = example_rng(self.config.seed, iteration, 0).integers(0, len(self.dataset), size=self.config.batch_size)
        examples = list(self.executor.map(
            lambda slot: self._example(state, iteration, slot, int(picks[slot])), range(len(picks))
        ))
        return collate_examples(examples)

    def close(self):
        self.executor.shutdown(wait=True)


def _check_finite(iteration: int, batch: TrainingBatch, terms: Dict[str, float], out_dir: str):
    if all(np.isfinite(value) for value in terms.values()):
        return
    dump = os.path.join(out_dir, f"nonfinite_{iteration}.json")
    with open(dump, "w", encoding="utf-8") as f:
        json.dump({"iteration": iteration, "sample_ids": batch.sample_ids, "terms": {k: repr(v) for k, v in terms.items()}}, f, indent=4)
    logger.error("Non-finite loss at iteration %d, batch dumped to %s", iteration, dump)
    raise NonFiniteLossError(iteration, batch.sample_ids, terms)


def _source_counts(batch: TrainingBatch) -> Dict[str, int]:
    return {kind: batch.sources.count(kind) for kind in ("augment", "densepose")}


class TrainResult(pydantic.BaseModel):
    checkpoint: str
    loss_log: str
    records: List[LossRecord]
    sampler_digest_before: Optional[str] = None
    sampler_digest_after: Optional[str] = None


def _context(config: TrainConfig) -> UVContext:
    return UVContext.build(Atlas.load(config.atlas_path), config.resolution)


def _build_extractor(config: TrainConfig, device: torch.device) -> PerceptualFeatureExtractor:
    return build_extractor(config.extractor, config.extractor_weights, config.extractor_width_divisor).to(device)


def _save(kind: CheckpointKind, params: Dict[str, Dict[str, Any]], config: TrainConfig, iteration: int, terms: Dict[str, float]) -> str:
    path = os.path.join(config.out_dir, f"{kind}_{iteration:06d}.pt")
    checkpoint_save(params, CheckpointMeta(kind=kind, iteration=iteration, seed=config.seed, config=config.model_dump(mode="json")), path)
    latest = os.path.join(config.out_dir, f"{kind}_latest.pt")
    checkpoint_save(params, CheckpointMeta(kind=kind, iteration=iteration, seed=config.seed, config=config.model_dump(mode="json")), latest)
    asyncio.run(register_run(config.out_dir, RunEntry(kind=kind, iteration=iteration, path=path, seed=config.seed, losses=terms)))
    logger.info("Saved %s checkpoint at iteration %d to %s", kind, iteration, path)
    return path


# Phase 1

def train_sampler(config: TrainConfig, dataset: Optional[FixtureDataset] = None, resume: Optional[str] = None) -> TrainResult:
    """
    Curriculum loop: build a batch, predict the grid, resample T_input, region-weighted L1 +
    perceptual distance, one Adam step. Resuming continues the step/alpha schedule at the
    saved iteration.
    """
    seed_everything(config.seed, config.deterministic)
    device = resolve_device(config.device)
    dataset = dataset or FixtureDataset(config.fixture_root, _context(config))
    os.makedirs(config.out_dir, exist_ok=True)

    net = SamplerNet(config.sampler_config()).to(device)
    optimizer = torch.optim.Adam(net.parameters(), lr=config.lr, betas=config.betas)
    extractor = _build_extractor(config, device)
    weights = region_weight_map(dataset.context.partition, device)

    start = 0
    if resume:
        params, meta = checkpoint_load(resume, device)
        if meta.kind != "sampler":
            raise CheckpointVersionError(f"Cannot resume sampler training from a {meta.kind} checkpoint.")
        net.load_state_dict(params["sampler"])
        optimizer.load_state_dict(params["optimizer"])
        start = meta.iteration
        logger.info("Resuming sampler training from %s at iteration %d", resume, start)

    state = config.curriculum_state(start)
    builder = BatchBuilder(dataset, config)
    log_path = os.path.join(config.out_dir, "sampler_loss.ndjson")
    records: List[LossRecord] = []
    checkpoint = resume or ""
    net.train()

    try:
        with LossLog(log_path, append=resume is not None) as log:
            for iteration in range(start, config.iterations):
                batch = builder.build(state, iteration).to(device)
                grid = net(batch.t_input, batch.m_vis, batch.normal)
                t_sample = grid_sample(batch.t_input, grid)
                loss = sampler_loss(t_sample, batch.t_gt, weights, extractor, reduction=config.loss_reduction)

                terms = {"total": loss.total.item(), "recon": loss.recon.item(), "perceptual": loss.perceptual.item()}
                _check_finite(iteration, batch, terms, config.out_dir)

                optimizer.zero_grad(set_to_none=True)
                loss.total.backward()
                optimizer.step()

                record = LossRecord(
                    iteration=iteration, step=state.step, alpha=state.alpha, terms=terms,
                    sources=_source_counts(batch), augmented=sum(batch.augmented),
                )
                log.write(record)
                records.append(record)
                if iteration % config.log_every == 0:
                    logger.info("sampler it=%d step=%d alpha=%.3f loss=%.5f", iteration, state.step, state.alpha, terms["total"])

                state = state.advance()
                done = iteration + 1
                if done % config.checkpoint_every == 0 or done == config.iterations:
                    params = {"sampler": net.state_dict(), "optimizer": optimizer.state_dict()}
                    checkpoint = _save("sampler", params, config, done, terms)
    finally:
        builder.close()

    return TrainResult(checkpoint=checkpoint, loss_log=log_path, records=records)


# Phase 2

def refiner_step(
    sampler: SamplerNet,
    refiner: RefinerNet,
    discriminator: PatchDiscriminator,
    extractor: PerceptualFeatureExtractor,
    batch: TrainingBatch,
    m_uv: torch.Tensor,
    optimizers: Tuple[torch.optim.Optimizer, torch.optim.Optimizer],
    weights: LossWeights,
    schedule: PerceptualTapSchedule,
    reduction: str = "mean",
) -> Dict[str, torch.Tensor]:
    """One discriminator update followed by one refiner update. Returns the detached loss terms."""
    optimizer_g, optimizer_d = optimizers
    with torch.no_grad():
        t_sample = grid_sample(batch.t_input, sampler(batch.t_input, batch.m_vis, batch.normal))
    m_occ = (m_uv - batch.m_source).clamp(min=0.0)

    t_refine, m_blend = refiner(t_sample, m_occ)
    t_final = blend(t_sample, t_refine, m_blend)

    d_loss = discriminator_loss(discriminator, batch.t_gt, t_final)
    optimizer_d.zero_grad(set_to_none=True)
    d_loss.backward()
    optimizer_d.step()

    components = RefinerLossComponents(
        recon=refiner_recon_loss(t_final, t_sample, reduction),
        perceptual=tapped_perceptual_loss(t_final, batch.t_gt, extractor, schedule, reduction),
        gan=generator_adversarial_loss(discriminator, t_final),
        fm=feature_matching_loss(discriminator, batch.t_gt, t_final),
    )
    total = refiner_total_loss(components, weights)
    optimizer_g.zero_grad(set_to_none=True)
    total.backward()
    optimizer_g.step()

    return {
        "d_loss": d_loss.detach(), "total": total.detach(), "recon": components.recon.detach(),
        "perceptual": components.perceptual.detach(), "gan": components.gan.detach(), "fm": components.fm.detach(),
    }


def train_refiner(
    config: TrainConfig,
    sampler_checkpoint: str,
    dataset: Optional[FixtureDataset] = None,
    weights: Optional[LossWeights] = None,
    schedule: Optional[PerceptualTapSchedule] = None,
) -> TrainResult:
    """
    Adversarial loop against a frozen sampler. Inputs are drawn at the curriculum state the sampler
    finished on, with color jitter applied to input and ground truth with probability color_jitter_p.
    """
    seed_everything(config.seed, config.deterministic)
    device = resolve_device(config.device)
    dataset = dataset or FixtureDataset(config.fixture_root, _context(config))
    os.makedirs(config.out_dir, exist_ok=True)
    weights = weights or LossWeights()
    schedule = schedule or PerceptualTapSchedule()

    sampler, sampler_meta = load_sampler(sampler_checkpoint, device)
    if sampler.config.resolution != config.resolution:
        raise ConfigurationError(
            f"Sampler checkpoint is at {sampler.config.resolution}^2, refiner config at {config.resolution}^2."
        )
    sampler.requires_grad_(False)
    digest_before = parameter_digest(sampler)

    refiner = RefinerNet(config.refiner_config()).to(device)
    discriminator = PatchDiscriminator(config.discriminator_channels).to(device)
    optimizers = (
        torch.optim.Adam(refiner.parameters(), lr=config.lr, betas=config.betas),
        torch.optim.Adam(discriminator.parameters(), lr=config.lr, betas=config.betas),
    )
    extractor = _build_extractor(config, device)
    m_uv = torch.from_numpy(dataset.context.m_uv).to(device)[None, None]

    # final-step inputs: the curriculum is frozen where the sampler stopped
    state = config.curriculum_state(max(sampler_meta.iteration - 1, 0))
    builder = BatchBuilder(dataset, config, color_jitter_p=config.color_jitter_p)
    log_path = os.path.join(config.out_dir, "refiner_loss.ndjson")
    records: List[LossRecord] = []
    checkpoint = ""
    refiner.train()
    discriminator.train()

    try:
        with LossLog(log_path) as log:
            for iteration in range(config.iterations):
                batch = builder.build(state, iteration).to(device)
                losses = refiner_step(
                    sampler, refiner, discriminator, extractor, batch, m_uv, optimizers, weights, schedule, config.loss_reduction
                )
                terms = {name: value.item() for name, value in losses.items()}
                _check_finite(iteration, batch, terms, config.out_dir)

                record = LossRecord(iteration=iteration, step=state.step, alpha=state.alpha, terms=terms, sources=_source_counts(batch))
                log.write(record)
                records.append(record)
                if iteration % config.log_every == 0:
                    logger.info("refiner it=%d d=%.4f g=%.4f", iteration, terms["d_loss"], terms["total"])

                done = iteration + 1
                if done % config.checkpoint_every == 0 or done == config.iterations:
                    params = {
                        "refiner": refiner.state_dict(),
                        "discriminator": discriminator.state_dict(),
                        "optimizer_g": optimizers[0].state_dict(),
                        "optimizer_d": optimizers[1].state_dict(),
                    }
                    checkpoint = _save("refiner", params, config, done, terms)
    finally:
        builder.close()

    digest_after = parameter_digest(sampler)
    if digest_after != digest_before:
        raise RuntimeError("Sampler parameters changed during refiner training.")

    return TrainResult(
        checkpoint=checkpoint, loss_log=log_path, records=records,
        sampler_digest_before=digest_before, sampler_digest_after=digest_after,
    )
