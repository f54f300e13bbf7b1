"""
SamplerNet: predicts a sampling grid that reads the visible part of T_input to fill the whole texture.

Two encoders (appearance on T_input + M_vis, geometry on the normal map) and one decoder.
Appearance features skip-connect to the decoder at matching scales; geometry features are
fused at the bottleneck only.
"""

import pydantic, torch
import numpy as np
import torch.nn as nn
import torch.nn.functional as F

from typing import List, NamedTuple, Optional
try:
    from typing import Self
except ImportError:  # Python < 3.11
    from typing_extensions import Self
from modules.types import InvalidInputError
from modules.uvspace import RegionPartition
from modules.perceptual import PerceptualFeatureExtractor, perceptual_distance


ENCODER_STAGES = 5
MIN_RESOLUTION = 64


class SamplerConfig(pydantic.BaseModel):
    resolution: int = pydantic.Field(256, description="Texture side in texels; a multiple of 32.")
    base_channels: int = pydantic.Field(32, ge=1, description="Width of the stem convolution.")
    max_channels: int = pydantic.Field(256, ge=1)
    leaky_slope: float = pydantic.Field(0.2, ge=0.0)

    @pydantic.model_validator(mode="after")
    def _check_resolution(self) -> Self:
        if self.resolution < MIN_RESOLUTION or self.resolution % 2 ** ENCODER_STAGES:
            raise ValueError(f"resolution must be a multiple of 32 and >= {MIN_RESOLUTION}, got {self.resolution}")
        return self

    def widths(self) -> List[int]:
        return [min(self.base_channels * 2 ** i, self.max_channels) for i in range(ENCODER_STAGES + 1)]


# Building blocks

class GatedConv2d(nn.Module):
    """LeakyReLU(conv_f(x)) * sigmoid(conv_g(x))."""
    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, stride: int = 1, slope: float = 0.2):
        super().__init__()
        self.feature = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding=kernel_size // 2)
        self.gate = nn.Conv2d(in_channels, out_channels, kernel_size, stride, padding=kernel_size // 2)
        self.activation = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.activation(self.feature(x)) * torch.sigmoid(self.gate(x))


class GatedResBlock(nn.Module):
    """Two gated convolutions with instance norm; the stride is applied by the first one."""
    def __init__(self, in_channels: int, out_channels: int, stride: int = 1, slope: float = 0.2):
        super().__init__()
        self.conv1 = GatedConv2d(in_channels, out_channels, 3, stride, slope)
        self.norm1 = nn.InstanceNorm2d(out_channels, affine=True)
        self.conv2 = GatedConv2d(out_channels, out_channels, 3, 1, slope)
        self.norm2 = nn.InstanceNorm2d(out_channels, affine=True)
        if in_channels == out_channels and stride == 1:
            self.skip = nn.Identity()
        else:
            self.skip = nn.Conv2d(in_channels, out_channels, kernel_size=1, stride=stride)
        self.activation = nn.LeakyReLU(slope)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        y = self.norm1(self.conv1(x))
        y = self.norm2(self.conv2(y))
        return self.activation(y + self.skip(x))


class Encoder(nn.Module):
    """One convolution followed by five stride-2 gated residual stages. Returns every scale, finest first."""
    def __init__(self, in_channels: int, widths: List[int], slope: float):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(in_channels, widths[0], kernel_size=3, padding=1),
            nn.InstanceNorm2d(widths[0], affine=True),
            nn.LeakyReLU(slope),
        )
        self.stages = nn.ModuleList(
            GatedResBlock(widths[i], widths[i + 1], stride=2, slope=slope) for i in range(ENCODER_STAGES)
        )

    def forward(self, x: torch.Tensor) -> List[torch.Tensor]:
        features = [self.stem(x)]
        for stage in self.stages:
            features.append(stage(features[-1]))
        return features


class UpBlock(nn.Module):
    def __init__(self, in_channels: int, skip_channels: int, out_channels: int, slope: float):
        super().__init__()
        self.block = GatedResBlock(in_channels + skip_channels, out_channels, slope=slope)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        x = F.interpolate(x, size=skip.shape[-2:], mode="nearest")
        return self.block(torch.cat((x, skip), dim=1))


def identity_grid(height: int, width: int, device: torch.device | str = "cpu", dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """(1,H,W,2) grid whose entries are the texel centres, so grid_sample returns its input unchanged."""
    ys = (2.0 * torch.arange(height, device=device, dtype=dtype) + 1.0) / height - 1.0
    xs = (2.0 * torch.arange(width, device=device, dtype=dtype) + 1.0) / width - 1.0
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack((gx, gy), dim=-1).unsqueeze(0)


class SamplerNet(nn.Module):
    def __init__(self, config: Optional[SamplerConfig] = None):
        super().__init__()
        self.config = config or SamplerConfig()
        widths = self.config.widths()
        slope = self.config.leaky_slope

        self.appearance = Encoder(4, widths, slope)
        self.geometry = Encoder(3, widths, slope)
        self.fuse = nn.Sequential(
            nn.Conv2d(2 * widths[-1], widths[-1], kernel_size=1),
            nn.InstanceNorm2d(widths[-1], affine=True),
            nn.LeakyReLU(slope),
        )
        self.decoder = nn.ModuleList(
            UpBlock(widths[level + 1], widths[level], widths[level], slope)
            for level in reversed(range(ENCODER_STAGES))
        )
        self.head = nn.Conv2d(widths[0], 2, kernel_size=3, padding=1)

    def _check_inputs(self, t_input: torch.Tensor, m_vis: torch.Tensor, normal: torch.Tensor):
        expected = (self.config.resolution, self.config.resolution)
        for name, tensor, channels in (("t_input", t_input, 3), ("m_vis", m_vis, 1), ("normal", normal, 3)):
            if tensor.dim() != 4 or tensor.shape[1] != channels or tuple(tensor.shape[-2:]) != expected:
                raise InvalidInputError(
                    f"{name} must be (B,{channels},{expected[0]},{expected[1]}), got {tuple(tensor.shape)}"
                )

    def forward(self, t_input: torch.Tensor, m_vis: torch.Tensor, normal: torch.Tensor) -> torch.Tensor:
        """(B,3,H,W), (B,1,H,W), (B,3,H,W) -> sampling grid (B,H,W,2) in [-1,1]."""
        self._check_inputs(t_input, m_vis, normal)

        skips = self.appearance(torch.cat((t_input, m_vis), dim=1))
        bottleneck = self.geometry(normal)[-1]
        x = self.fuse(torch.cat((skips[-1], bottleneck), dim=1))
        for level, block in zip(reversed(range(ENCODER_STAGES)), self.decoder):
            x = block(x, skips[level])

        offset = self.head(x).permute(0, 2, 3, 1)
        base = identity_grid(*t_input.shape[-2:], device=t_input.device, dtype=offset.dtype)
        # a zero head is the identity grid; tanh keeps every read inside [-1,1]
        return torch.tanh(torch.atanh(base) + offset)


def grid_sample(t: torch.Tensor, grid: torch.Tensor) -> torch.Tensor:
    """
    Bilinear read of t (B,C,H,W) at grid (B,H',W',2), grid in [-1,1] mapped to texel centres
    (align_corners=False). Reads beyond the texture clamp to the border texels.
    """
    return F.grid_sample(t, grid.to(t.dtype), mode="bilinear", padding_mode="border", align_corners=False)


# Losses

def region_weight_map(partition: RegionPartition, device: torch.device | str = "cpu") -> torch.Tensor:
    """(1,1,H,W) map of sum_i w_i * M_i. The region masks are disjoint, so this is w_i inside region i."""
    weights = sum(partition.weights[name] * partition.masks[name] for name in partition.masks)
    return torch.from_numpy(np.asarray(weights, dtype=np.float32)).to(device)[None, None]


def weighted_recon_loss(
    t_sample: torch.Tensor,
    t_gt: torch.Tensor,
    partition: RegionPartition | torch.Tensor,
    reduction: str = "sum",
) -> torch.Tensor:
    """
    sum_i || w_i * M_i (t_sample - t_gt) ||_1.
    `partition` may be given as a precomputed region_weight_map. "sum" sums each sample and
    averages over the batch, "mean" averages over every element.
    """
    weights = partition if isinstance(partition, torch.Tensor) else region_weight_map(partition, t_sample.device)
    error = (weights.to(t_sample.dtype) * (t_sample - t_gt)).abs()
    if reduction == "mean":
        return error.mean()
    return error.flatten(1).sum(dim=1).mean()


class SamplerLoss(NamedTuple):
    total: torch.Tensor
    recon: torch.Tensor
    perceptual: torch.Tensor


def sampler_loss(
    t_sample: torch.Tensor,
    t_gt: torch.Tensor,
    partition: RegionPartition | torch.Tensor,
    extractor: PerceptualFeatureExtractor,
    recon_weight: float = 1.0,
    perceptual_weight: float = 1.0,
    reduction: str = "sum",
) -> SamplerLoss:
    recon = weighted_recon_loss(t_sample, t_gt, partition, reduction)
    perceptual = perceptual_distance(t_sample, t_gt, extractor)
    return SamplerLoss(total=recon_weight * recon + perceptual_weight * perceptual, recon=recon, perceptual=perceptual)
