import os, pytest, torch
import numpy as np

from modules.uvspace import Atlas, UVContext
from modules.fixtures import FixtureSpec, generate_fixtures
from modules.curriculum import FixtureDataset
from modules.training import TrainConfig


SLOW = os.environ.get("TEXGEN_SLOW_TESTS") == "1"


def pytest_collection_modifyitems(config, items):
    if SLOW:
        return
    skip = pytest.mark.skip(reason="set TEXGEN_SLOW_TESTS=1 to run long training tests")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def atlas() -> Atlas:
    return Atlas.load()


@pytest.fixture(scope="session")
def context64(atlas) -> UVContext:
    return UVContext.build(atlas, 64)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed_torch():
    torch.manual_seed(0)


@pytest.fixture(scope="session")
def fixture_root(tmp_path_factory) -> str:
    """Four 64x64 samples, two of them with misaligned DensePose-style partial textures."""
    root = str(tmp_path_factory.mktemp("fixtures"))
    generate_fixtures(FixtureSpec(count=4, resolution=64, seed=7, densepose_count=2), root)
    return root


@pytest.fixture(scope="session")
def dataset(fixture_root, context64) -> FixtureDataset:
    return FixtureDataset(fixture_root, context64)


def tiny_config(out_dir: str, fixture_root: str, **overrides) -> TrainConfig:
    values = dict(
        resolution=64,
        batch_size=2,
        iterations=10,
        iters_per_step=4,
        sampler_channels=4,
        sampler_max_channels=16,
        refiner_channels=4,
        discriminator_channels=8,
        extractor_width_divisor=16,
        workers=2,
        checkpoint_every=5,
        log_every=50,
        fixture_root=fixture_root,
        out_dir=out_dir,
    )
    values.update(overrides)
    return TrainConfig(**values)


@pytest.fixture(scope="session")
def checkpoints(tmp_path_factory, fixture_root):
    """Untrained tiny sampler and refiner checkpoints at 64x64, as (sampler path, refiner path)."""
    from modules.sampler import SamplerNet
    from modules.refiner import RefinerNet
    from modules.training import CheckpointMeta, checkpoint_save

    out = tmp_path_factory.mktemp("checkpoints")
    config = tiny_config(str(out), fixture_root)
    meta = lambda kind: CheckpointMeta(kind=kind, iteration=1, seed=config.seed, config=config.model_dump(mode="json"))
    sampler_path, refiner_path = str(out / "sampler.pt"), str(out / "refiner.pt")
    checkpoint_save({"sampler": SamplerNet(config.sampler_config()).state_dict()}, meta("sampler"), sampler_path)
    checkpoint_save({"refiner": RefinerNet(config.refiner_config()).state_dict()}, meta("refiner"), refiner_path)
    return sampler_path, refiner_path
