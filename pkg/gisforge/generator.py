"""Coarse-to-fine cascade generator.

Module ``C_0`` sees the coarsest input level. Every later module ``C_i``
receives the previous feature map, bilinearly upsampled by two, concatenated
with the input level at its own resolution. A final 1x1 convolution projects
the last feature map to ``3K`` channels, mapped to [0, 1] by
``(tanh + 1) / 2``: K candidate RGB images of the full frame.

"""
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

from torch import nn
import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigDict, ConfigError
from .gbuffer import InputPyramid


class ShapeError(ValueError):
    """Tensor shapes disagree with a network's configuration."""


@dataclass(frozen=True)
class GeneratorConfig:
    levels: int = 4
    base: Tuple[int, int] = (8, 8)
    widths: Tuple[int, ...] = (64, 64, 32, 32)
    k: int = 9
    leaky_slope: float = 0.2
    zero_head: bool = False

    def __post_init__(self) -> None:
        if self.levels < 2:
            raise ConfigError(f'levels must be >= 2, got {self.levels}')
        if len(self.widths) != self.levels:
            raise ConfigError(
                f'{len(self.widths)} widths given for {self.levels} levels'
            )
        if any(w <= 0 for w in self.widths):
            raise ConfigError(f'widths must be positive, got {self.widths}')
        if self.k < 1:
            raise ConfigError(f'k must be >= 1, got {self.k}')
        if min(self.base) < 1:
            raise ConfigError(f'invalid base resolution {self.base}')

    @classmethod
    def from_config(cls, config: ConfigDict) -> 'GeneratorConfig':
        levels = config['gen.levels']
        height, width = config['forge.size']
        scale = 2 ** (levels - 1)
        if height % scale or width % scale:
            raise ConfigError(
                f'forge.size {height}x{width} not divisible by {scale} '
                f'for gen.levels={levels}'
            )
        return cls(
            levels=levels,
            base=(height // scale, width // scale),
            widths=tuple(config['gen.widths']),
            k=config['gen.k'],
            leaky_slope=config['gen.leaky_slope'],
            zero_head=config['gen.zero_head'],
        )

    def level_size(self, level: int) -> Tuple[int, int]:
        h0, w0 = self.base
        return h0 * 2 ** level, w0 * 2 ** level

    @property
    def full_size(self) -> Tuple[int, int]:
        return self.level_size(self.levels - 1)


class ChannelLayerNorm(nn.Module):
    """Layer normalization over the channels of each pixel."""

    def __init__(self, channels: int) -> None:
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.norm(x.permute(0, 2, 3, 1)).permute(0, 3, 1, 2)


class CascadeModule(nn.Module):
    """Input, intermediate and output 3x3 conv blocks, each conv-LN-LReLU."""

    def __init__(self, channels_in: int, width: int, slope: float) -> None:
        super().__init__()
        layers: List[nn.Module] = []
        for i in range(3):
            layers += [
                nn.Conv2d(channels_in if i == 0 else width, width, 3, padding=1),
                ChannelLayerNorm(width),
                nn.LeakyReLU(slope),
            ]
        self.block = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(x)


class Generator(nn.Module):
    def __init__(self, config: GeneratorConfig, channels_in: int) -> None:
        super().__init__()
        self.config = config
        self.channels_in = channels_in
        cascade = []
        for i, width in enumerate(config.widths):
            module_in = channels_in if i == 0 else config.widths[i - 1] + channels_in
            cascade.append(CascadeModule(module_in, width, config.leaky_slope))
        self.cascade = nn.ModuleList(cascade)
        self.head = nn.Conv2d(config.widths[-1], 3 * config.k, 1)
        if config.zero_head:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

    def check_pyramid(self, pyramid: Sequence[torch.Tensor]) -> None:
        if len(pyramid) != self.config.levels:
            raise ShapeError(
                f'pyramid has {len(pyramid)} levels, generator expects '
                f'{self.config.levels}'
            )
        batch = pyramid[0].shape[0]
        for i, x in enumerate(pyramid):
            expected = (batch, self.channels_in, *self.config.level_size(i))
            if tuple(x.shape) != expected:
                raise ShapeError(
                    f'level {i}: input shape {tuple(x.shape)}, expected {expected}'
                )

    def forward(self, pyramid: Sequence[torch.Tensor]) -> torch.Tensor:
        """Synthesize K images from NCHW pyramid levels, coarsest first.

        :returns: Tensor of shape ``N x K x 3 x H x W`` with values in [0, 1].
        :raises ShapeError: Naming the first level that disagrees.

        """
        self.check_pyramid(pyramid)
        features: Optional[torch.Tensor] = None
        for module, x in zip(self.cascade, pyramid):
            if features is not None:
                features = F.interpolate(
                    features, scale_factor=2, mode='bilinear', align_corners=False
                )
                x = torch.cat([features, x], dim=1)
            features = module(x)
        assert features is not None
        out = (torch.tanh(self.head(features)) + 1) / 2
        n, _, h, w = out.shape
        return out.view(n, self.config.k, 3, h, w)


def build_generator(
    config: GeneratorConfig, channels_in: int, seed: Optional[int] = None
) -> Generator:
    """Build a generator; with `seed`, its initial parameters are reproducible.

    The global torch RNG state is left untouched when `seed` is given.

    """
    if seed is None:
        return Generator(config, channels_in)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Generator(config, channels_in)


def pyramid_tensors(
    pyramids: Sequence[InputPyramid],
    dtype: torch.dtype = torch.float32,
    device: Optional[torch.device] = None,
) -> List[torch.Tensor]:
    """Stack the pyramids of a batch into per-level NCHW tensors."""
    levels = len(pyramids[0])
    tensors = []
    for i in range(levels):
        stacked = np.stack([p[i] for p in pyramids]).transpose(0, 3, 1, 2)
        tensor = torch.from_numpy(np.ascontiguousarray(stacked))
        tensors.append(tensor.to(dtype=dtype, device=device))
    return tensors


def composite(
    outputs: torch.Tensor,
    mask: torch.Tensor,
    background: torch.Tensor,
    mode: str = 'identity',
) -> torch.Tensor:
    """Compositing stage after the generator.

    ``'identity'`` returns the network's full-frame outputs unchanged;
    ``'hard'`` pastes them over `background` through `mask`.

    :param outputs: ``N x K x 3 x H x W``.
    :param mask: ``N x 1 x H x W``.
    :param background: ``N x 3 x H x W``.

    """
    if mode == 'identity':
        return outputs
    if mode == 'hard':
        m = mask.unsqueeze(1)
        return m * outputs + (1 - m) * background.unsqueeze(1)
    raise ValueError(f'unknown composite mode: {mode}')


def to_images(outputs: torch.Tensor) -> np.ndarray:
    """Convert ``N x K x 3 x H x W`` outputs to ``N x K x H x W x 3`` arrays."""
    return outputs.detach().cpu().permute(0, 1, 3, 4, 2).numpy()
