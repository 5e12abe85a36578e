"""Patch discriminator and its gradient regularizer.

The discriminator sees RGB images only. Four stride-2 convolutions and a
final stride-1 convolution map an ``H x W`` image to an ``H/16 x W/16`` map of
raw logits, one per image patch.

"""
from dataclasses import dataclass
from typing import Callable, List, Optional, Tuple

from torch import nn
import torch
import torch.nn.functional as F

from .config import ConfigDict, ConfigError
from .generator import ShapeError

#: Total downsampling factor of the logit map.
PATCH_STRIDE = 16


@dataclass(frozen=True)
class DiscriminatorConfig:
    widths: Tuple[int, ...] = (32, 64, 128, 256, 1)
    leaky_slope: float = 0.2
    padding: str = 'zeros'

    def __post_init__(self) -> None:
        if len(self.widths) != 5 or self.widths[-1] != 1:
            raise ConfigError(f'expected 5 widths ending with 1, got {self.widths}')
        if self.padding not in ('zeros', 'circular'):
            raise ConfigError(f'unknown padding mode: {self.padding}')

    @classmethod
    def from_config(cls, config: ConfigDict) -> 'DiscriminatorConfig':
        return cls(
            widths=tuple(config['disc.widths']),
            leaky_slope=config['disc.leaky_slope'],
            padding=config['disc.padding'],
        )


class Discriminator(nn.Module):
    def __init__(self, config: DiscriminatorConfig = DiscriminatorConfig()) -> None:
        super().__init__()
        self.config = config
        layers: List[nn.Module] = []
        channels = 3
        for width in config.widths[:-1]:
            layers += [
                nn.Conv2d(
                    channels, width, 4, stride=2, padding=1, padding_mode=config.padding
                ),
                nn.LeakyReLU(config.leaky_slope),
            ]
            channels = width
        self.features = nn.Sequential(*layers)
        # Kernel 4 at stride 1 keeps the size with one pixel of padding
        # before and two after.
        self.logits = nn.Conv2d(channels, config.widths[-1], 4, stride=1)

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        """Map ``N x 3 x H x W`` images to ``N x 1 x H/16 x W/16`` logits."""
        if image.dim() != 4 or image.shape[1] != 3:
            raise ShapeError(f'expected N x 3 x H x W images, got {tuple(image.shape)}')
        height, width = image.shape[-2:]
        if height % PATCH_STRIDE or width % PATCH_STRIDE:
            raise ShapeError(
                f'image size {height}x{width} must be divisible by {PATCH_STRIDE}'
            )
        x = self.features(image)
        mode = 'constant' if self.config.padding == 'zeros' else 'circular'
        return self.logits(F.pad(x, (1, 2, 1, 2), mode=mode))


def build_discriminator(
    config: DiscriminatorConfig, seed: Optional[int] = None
) -> Discriminator:
    if seed is None:
        return Discriminator(config)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return Discriminator(config)


def d_regularizer(
    disc: Callable[[torch.Tensor], torch.Tensor],
    real: torch.Tensor,
    fake: torch.Tensor,
    gamma: float = 2.0,
) -> torch.Tensor:
    """Gradient-norm regularizer of the discriminator.

    ``gamma/2 * (E_real[(1 - sigmoid(D))^2 |grad_x D|^2]
    + E_fake[sigmoid(D)^2 |grad_x D|^2])``, where each logit cell is treated
    as its own discriminator output and the expectations average over samples
    and cells. The result is differentiable w.r.t. the discriminator's
    parameters; `real` and `fake` are treated as constants.

    """
    if gamma == 0:
        return real.new_zeros(())
    total = real.new_zeros(())
    for images, is_real in ((real, True), (fake, False)):
        images = images.detach().requires_grad_(True)
        logits = disc(images).flatten(1)
        cells = logits.shape[1]
        for c in range(cells):
            (grad,) = torch.autograd.grad(
                logits[:, c].sum(), images, create_graph=True, allow_unused=True
            )
            if grad is None:
                continue
            norm2 = grad.pow(2).flatten(1).sum(dim=1)
            prob = torch.sigmoid(logits[:, c])
            weight = (1 - prob) ** 2 if is_real else prob ** 2
            total = total + (weight * norm2).mean() / cells
    return gamma / 2 * total


def patch_accuracy(
    logits_real: torch.Tensor, logits_fake: torch.Tensor, fake_targets: torch.Tensor
) -> float:
    """Fraction of logit cells the discriminator classifies correctly.

    A cell counts as classified real when its logit is positive. Real-image
    cells should be real; fake-image cells should match `fake_targets`, the
    soft targets of :func:`~gisforge.objective.adversarial_d_loss` (real
    where the target exceeds one half).

    """
    with torch.no_grad():
        real_ok = (logits_real > 0).float()
        fake_ok = ((logits_fake > 0) == (fake_targets > 0.5)).float()
        return float(torch.cat([real_ok.flatten(), fake_ok.flatten()]).mean())
