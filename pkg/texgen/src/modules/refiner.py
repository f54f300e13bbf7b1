"""
RefinerNet: a U-Net that repaints the sampled texture and predicts the mask used to blend
the sampled and refined textures, plus the patch discriminator and the refiner losses.
"""

import pydantic, torch
import torch.nn as nn
import torch.nn.functional as F

from typing import List, NamedTuple, Optional, Tuple
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self
from modules.types import ConfigurationError, InvalidInputError
from modules.perceptual import PerceptualFeatureExtractor


DOWN_STAGES = 3
RESIDUAL_BLOCKS = 9
PROBABILITY_EPS = 1e-7


class RefinerConfig(pydantic.BaseModel):
    resolution: int = pydantic.Field(256, description="Texture side in texels; a multiple of 8.")
    base_channels: int = pydantic.Field(32, ge=1)
    discriminator_channels: int = pydantic.Field(64, ge=1)

    @pydantic.model_validator(mode="after")
    def _check_resolution(self) -> Self:
        if self.resolution % 2 ** DOWN_STAGES:
            raise ValueError(f"resolution must be a multiple of {2 ** DOWN_STAGES}, got {self.resolution}")
        return self


class LossWeights(pydantic.BaseModel):
    recon: float = pydantic.Field(10.0, ge=0.0)
    perceptual: float = pydantic.Field(10.0, ge=0.0)
    gan: float = pydantic.Field(1.0, ge=0.0)
    fm: float = pydantic.Field(10.0, ge=0.0)


class PerceptualTapSchedule(pydantic.BaseModel):
    taps: Tuple[int, ...] = (1, 6, 11, 20, 29)
    divisors: Tuple[float, ...] = (32.0, 16.0, 8.0, 4.0, 1.0)

    @pydantic.model_validator(mode="after")
    def _check_schedule(self) -> Self:
        if len(self.taps) != 5 or len(self.divisors) != 5:
            raise ValueError("The schedule has exactly 5 taps and 5 divisors.")
        if any(a >= b for a, b in zip(self.taps, self.taps[1:])):
            raise ValueError(f"Taps must be strictly increasing, got {self.taps}")
        if any(d <= 0 for d in self.divisors):
            raise ValueError(f"Divisors must be positive, got {self.divisors}")
        return self


# Generator

class ResnetBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels, affine=True), nn.ReLU(True),
            nn.ReflectionPad2d(1), nn.Conv2d(channels, channels, 3), nn.InstanceNorm2d(channels, affine=True),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


def _conv_block(in_channels: int, out_channels: int, stride: int = 1) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_channels, out_channels, kernel_size=3, stride=stride, padding=1),
        nn.InstanceNorm2d(out_channels, affine=True),
        nn.ReLU(True),
    )


class RefinerNet(nn.Module):
    """
    (T_sample, M_occ) -> (T_refine, M_blend).
    Three stride-2 stages, nine residual blocks, three upsampling stages with U-Net skips.
    """
    def __init__(self, config: Optional[RefinerConfig] = None):
        super().__init__()
        self.config = config or RefinerConfig()
        c = self.config.base_channels
        widths = [c * 2 ** i for i in range(DOWN_STAGES + 1)]

        self.stem = nn.Sequential(
            nn.ReflectionPad2d(3), nn.Conv2d(4, c, kernel_size=7), nn.InstanceNorm2d(c, affine=True), nn.ReLU(True)
        )
        self.down = nn.ModuleList(_conv_block(widths[i], widths[i + 1], stride=2) for i in range(DOWN_STAGES))
        self.bottleneck = nn.Sequential(*[ResnetBlock(widths[-1]) for _ in range(RESIDUAL_BLOCKS)])
        self.up = nn.ModuleList(
            _conv_block(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(DOWN_STAGES))
        )
        self.texture_head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 3, kernel_size=7))
        self.mask_head = nn.Sequential(nn.ReflectionPad2d(3), nn.Conv2d(c, 1, kernel_size=7))

    def forward(self, t_sample: torch.Tensor, m_occ: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        expected = (self.config.resolution, self.config.resolution)
        if t_sample.dim() != 4 or t_sample.shape[1] != 3 or tuple(t_sample.shape[-2:]) != expected:
            raise InvalidInputError(f"t_sample must be (B,3,{expected[0]},{expected[1]}), got {tuple(t_sample.shape)}")
        if tuple(m_occ.shape) != (t_sample.shape[0], 1) + expected:
            raise InvalidInputError(f"m_occ must be (B,1,{expected[0]},{expected[1]}), got {tuple(m_occ.shape)}")

        x = self.stem(torch.cat((t_sample, m_occ), dim=1))
        skips = [x]
        for stage in self.down:
            x = stage(x)
            skips.append(x)
        x = self.bottleneck(x)
        for stage, skip in zip(self.up, reversed(skips[:-1])):
            x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
            x = stage(torch.cat((x, skip), dim=1))

        return torch.sigmoid(self.texture_head(x)), torch.sigmoid(self.mask_head(x))


def blend(t_sample, t_refine, m_blend):
    """T_final = T_sample * M_blend + T_refine * (1 - M_blend). Works on arrays and tensors alike."""
    return t_sample * m_blend + t_refine * (1.0 - m_blend)


# Discriminator

class DiscriminatorOutput(NamedTuple):
    logits: torch.Tensor
    features: List[torch.Tensor]  # l_1..l_3


class PatchDiscriminator(nn.Module):
    """
    70x70 patch classifier: three stride-2 stages, one stride-1 stage, then a 1-channel logit map.
    Features l_1..l_3 are the outputs of the first three activations.
    """
    def __init__(self, channels: int = 64, in_channels: int = 3):
        super().__init__()
        self.layers = nn.ModuleList([
            nn.Sequential(nn.Conv2d(in_channels, channels, 4, 2, 1), nn.LeakyReLU(0.2, True)),
            nn.Sequential(nn.Conv2d(channels, channels * 2, 4, 2, 1), nn.InstanceNorm2d(channels * 2), nn.LeakyReLU(0.2, True)),
            nn.Sequential(nn.Conv2d(channels * 2, channels * 4, 4, 2, 1), nn.InstanceNorm2d(channels * 4), nn.LeakyReLU(0.2, True)),
            nn.Sequential(nn.Conv2d(channels * 4, channels * 8, 4, 1, 1), nn.InstanceNorm2d(channels * 8), nn.LeakyReLU(0.2, True)),
        ])
        self.classifier = nn.Conv2d(channels * 8, 1, 4, 1, 1)

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        features = []
        for layer in self.layers:
            x = layer(x)
            features.append(x)
        return DiscriminatorOutput(logits=self.classifier(x), features=features[:3])


# Losses

def _l1(a: torch.Tensor, b: torch.Tensor, reduction: str) -> torch.Tensor:
    error = (a - b).abs()
    if reduction == "mean":
        return error.mean()
    return error.flatten(1).sum(dim=1).mean()


def refiner_recon_loss(t_final: torch.Tensor, t_sample: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """|| T_sample - T_final ||_1. Compared against T_sample, never against the ground truth."""
    return _l1(t_sample, t_final, reduction)


def tapped_perceptual_loss(
    t_final: torch.Tensor,
    t_gt: torch.Tensor,
    extractor: PerceptualFeatureExtractor,
    schedule: Optional[PerceptualTapSchedule] = None,
    reduction: str = "sum",
) -> torch.Tensor:
    """sum_i (1 / w_i) * || F_i(T_GT) - F_i(T_final) ||_1 over the scheduled taps."""
    schedule = schedule or PerceptualTapSchedule()
    missing = [tap for tap in schedule.taps if tap not in extractor.taps]
    if missing:
        raise ConfigurationError(f"Perceptual extractor does not expose taps {missing} (has {extractor.taps})")

    fake = extractor.tapped(t_final)
    with torch.no_grad():
        real = extractor.tapped(t_gt)
    total = t_final.new_zeros(())
    for tap, divisor in zip(schedule.taps, schedule.divisors):
        total = total + _l1(real[tap], fake[tap], reduction) / divisor
    return total


def _probability(logits: torch.Tensor) -> torch.Tensor:
    return torch.sigmoid(logits).clamp(PROBABILITY_EPS, 1.0 - PROBABILITY_EPS)


def discriminator_loss(d: nn.Module, t_gt: torch.Tensor, t_final: torch.Tensor) -> torch.Tensor:
    """-[log D(T_GT) + log(1 - D(T_final))], averaged over batch and patch map."""
    real = _probability(d(t_gt).logits)
    fake = _probability(d(t_final.detach()).logits)
    return -(torch.log(real).mean() + torch.log(1.0 - fake).mean())


def generator_adversarial_loss(d: nn.Module, t_final: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -log D(T_final)."""
    return -torch.log(_probability(d(t_final).logits)).mean()


def gan_losses(d: nn.Module, t_gt: torch.Tensor, t_final: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    return discriminator_loss(d, t_gt, t_final), generator_adversarial_loss(d, t_final)


def feature_matching_loss(d: nn.Module, t_gt: torch.Tensor, t_final: torch.Tensor) -> torch.Tensor:
    """sum over l_1..l_3 of the mean absolute difference between real and generated activations."""
    with torch.no_grad():
        real = d(t_gt).features
    fake = d(t_final).features
    total = t_final.new_zeros(())
    for r, f in zip(real, fake):
        total = total + (r - f).abs().mean()
    return total


class RefinerLossComponents(NamedTuple):
    recon: torch.Tensor | float
    perceptual: torch.Tensor | float
    gan: torch.Tensor | float
    fm: torch.Tensor | float


def refiner_total_loss(components: RefinerLossComponents, weights: Optional[LossWeights] = None):
    weights = weights or LossWeights()
    return (
        weights.recon * components.recon
        + weights.perceptual * components.perceptual
        + weights.gan * components.gan
        + weights.fm * components.fm
    )
