"""
Shared array aliases, pydantic models and exceptions used across the texture pipeline.
"""

import pydantic
import numpy as np, numpy.typing as npt

from typing import Dict, List, Literal, Optional


# Arrays on the data side are channel-last float32 in [0,1].
# Networks consume the same data as NCHW torch tensors.
TextureMap = npt.NDArray[np.float32]  # H x W x 3
Mask = npt.NDArray[np.float32]  # H x W (or H x W x 1)
NormalMap = npt.NDArray[np.float32]  # H x W x 3, unit normals encoded as (n + 1) / 2

SourceKind = Literal["augment", "densepose"]
RegionName = Literal["head", "body", "legs", "arms", "feet", "hands"]
REGION_NAMES: List[RegionName] = ["head", "body", "legs", "arms", "feet", "hands"]


class InvalidInputError(ValueError):
    """Rejected input: wrong shape, out-of-range part index, mismatched resolutions."""
    pass

class ConfigurationError(ValueError):
    """Rejected configuration: incomplete atlas, missing perceptual tap, bad config file."""
    pass

class FixtureError(FileNotFoundError):
    """A fixture required by the current operation is missing or unreadable."""
    pass

class CheckpointVersionError(ValueError):
    pass

class NonFiniteLossError(RuntimeError):
    """Raised by the training loops when a loss turns NaN/inf."""
    def __init__(self, iteration: int, sample_ids: List[str], terms: dict):
        self.iteration = iteration
        self.sample_ids = sample_ids
        self.terms = terms
        super().__init__(
            f"Non-finite loss at iteration {iteration} (terms={terms}, batch samples={sample_ids})"
        )


class LossRecord(pydantic.BaseModel):
    """One line of the newline-delimited loss log."""
    iteration: int
    step: int = pydantic.Field(..., description="Curriculum step at this iteration.")
    alpha: float = pydantic.Field(..., description="Augmentation strength at this iteration.")
    terms: Dict[str, float] = pydantic.Field(default_factory=dict, description="Per-term loss values.")
    sources: Dict[str, int] = pydantic.Field(default_factory=dict, description="Source kind counts in the batch.")
    augmented: Optional[int] = pydantic.Field(default=None, description="Number of augmented examples in the batch.")
