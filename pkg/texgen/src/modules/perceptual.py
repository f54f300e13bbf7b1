"""
Pluggable perceptual feature extractors and the cosine feature distance built on them.

The default extractor is a frozen, seeded, randomly initialized network laid out like
the VGG-19 feature stack (narrower), so the tap indices of a real VGG-19 apply unchanged.
A pretrained torchvision VGG-19 can be slotted in when its weights are available.
"""

import abc, logging, torch
import torch.nn as nn

from typing import Dict, List, Optional, Sequence, Tuple
from modules.types import ConfigurationError


logger = logging.getLogger(__name__)

VGG19_LAYOUT: List[int | str] = [64, 64, "M", 128, 128, "M", 256, 256, 256, 256, "M", 512, 512, 512, 512, "M", 512, 512, 512, 512, "M"]
DEFAULT_TAPS: Tuple[int, ...] = (1, 6, 11, 20, 29)  # relu1_1, relu2_1, relu3_1, relu4_1, relu5_1
DEFAULT_EXTRACTOR_SEED = 20230417

IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


class PerceptualFeatureExtractor(nn.Module, abc.ABC):
    """
    A fixed network returning feature maps at `taps` for a (B,3,H,W) batch in [0,1].
    Parameters never receive gradients; gradients still flow to the input.
    """
    taps: Tuple[int, ...]

    @abc.abstractmethod
    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        pass

    def tapped(self, x: torch.Tensor) -> Dict[int, torch.Tensor]:
        return dict(zip(self.taps, self.forward(x)))


class SequentialTapExtractor(PerceptualFeatureExtractor):
    """Runs an nn.Sequential feature stack and collects the outputs of the tapped layers."""
    def __init__(self, features: nn.Sequential, taps: Sequence[int], mean: Sequence[float], std: Sequence[float]):
        super().__init__()
        taps = tuple(sorted(taps))
        if not taps or taps[-1] >= len(features):
            raise ConfigurationError(f"Taps {taps} exceed the {len(features)} layers of the feature stack.")
        self.taps = taps
        self.features = features[: taps[-1] + 1]
        self.register_buffer("mean", torch.tensor(mean).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor(std).view(1, 3, 1, 1))
        self.requires_grad_(False)
        self.eval()

    def train(self, mode: bool = True):
        # always frozen
        return super().train(False)

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        x = (x - self.mean) / self.std
        outputs = []
        for index, layer in enumerate(self.features):
            x = layer(x)
            if index in self.taps:
                outputs.append(x)
        return outputs


def vgg_feature_stack(width_divisor: int = 1) -> nn.Sequential:
    layers: List[nn.Module] = []
    channels = 3
    for item in VGG19_LAYOUT:
        if item == "M":
            layers.append(nn.MaxPool2d(kernel_size=2, stride=2))
        else:
            width = max(int(item) // width_divisor, 4)
            layers += [nn.Conv2d(channels, width, kernel_size=3, padding=1), nn.ReLU(inplace=False)]
            channels = width
    return nn.Sequential(*layers)


class RandomPyramidExtractor(SequentialTapExtractor):
    """Seeded random VGG-19-shaped pyramid. Does not touch the global RNG state."""
    def __init__(self, taps: Sequence[int] = DEFAULT_TAPS, width_divisor: int = 8, seed: int = DEFAULT_EXTRACTOR_SEED):
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            features = vgg_feature_stack(width_divisor)
            for module in features:
                if isinstance(module, nn.Conv2d):
                    nn.init.kaiming_normal_(module.weight, nonlinearity="relu")
                    nn.init.zeros_(module.bias)
        super().__init__(features, taps, mean=(0.5, 0.5, 0.5), std=(0.5, 0.5, 0.5))


class TorchvisionVGGExtractor(SequentialTapExtractor):
    """
    torchvision VGG-19 features. `weights` is either a torchvision weights name
    (e.g. "DEFAULT", downloads on first use) or a path to a saved `features` state dict.
    """
    def __init__(self, taps: Sequence[int] = DEFAULT_TAPS, weights: Optional[str] = None):
        import torchvision

        if weights is None:
            logger.warning("VGG-19 extractor built without weights; distances are not comparable to published numbers.")
            features = torchvision.models.vgg19(weights=None).features
        elif weights.endswith((".pt", ".pth")):
            features = torchvision.models.vgg19(weights=None).features
            features.load_state_dict(torch.load(weights, map_location="cpu", weights_only=True))
        else:
            features = torchvision.models.vgg19(weights=weights).features
        super().__init__(features, taps, mean=IMAGENET_MEAN, std=IMAGENET_STD)


def build_extractor(kind: str = "random", weights: Optional[str] = None, width_divisor: int = 8) -> PerceptualFeatureExtractor:
    if kind == "random":
        return RandomPyramidExtractor(width_divisor=width_divisor)
    elif kind == "vgg19":
        return TorchvisionVGGExtractor(weights=weights)
    raise ConfigurationError(f"Unknown perceptual extractor '{kind}'")


def perceptual_distance(a: torch.Tensor, b: torch.Tensor, extractor: PerceptualFeatureExtractor, eps: float = 1e-10) -> torch.Tensor:
    """
    Cosine feature distance: channel-normalized features, 0.5 * squared difference
    (= 1 - cos where both vectors are nonzero), spatial mean, summed over taps, batch mean.
    """
    total = a.new_zeros(a.shape[0])
    for fa, fb in zip(extractor(a), extractor(b)):
        na = fa / (fa.norm(dim=1, keepdim=True) + eps)
        nb = fb / (fb.norm(dim=1, keepdim=True) + eps)
        total = total + 0.5 * (na - nb).pow(2).sum(dim=1).mean(dim=(1, 2))
    return total.mean()
