"""Frozen feature extractors and the masked perceptual loss."""
from typing import List, Optional, Sequence, Tuple

from torch import nn
import torch
import torch.nn.functional as F

from .config import ConfigDict, ConfigError
from .generator import ShapeError

LayerShape = Tuple[int, int, int]


class FeatureExtractor(nn.Module):
    """Frozen network exposing Λ layers of activations.

    Subclasses build their layers in ``__init__`` and call :meth:`freeze`.
    `layer_weights`, when set, overrides the default per-layer weights
    ``1 / (C_l * H_l * W_l)`` of :func:`perceptual_loss`.

    """

    #: Smallest image side the coarsest layer accepts.
    min_size: int = 1

    def __init__(self) -> None:
        super().__init__()
        self.layer_weights: Optional[List[float]] = None

    def freeze(self) -> 'FeatureExtractor':
        for param in self.parameters():
            param.requires_grad_(False)
        return self.eval()

    def train(self, mode: bool = True) -> 'FeatureExtractor':
        # Always in inference mode.
        return super().train(False)

    def check_size(self, height: int, width: int) -> None:
        if min(height, width) < self.min_size:
            raise ShapeError(
                f'image size {height}x{width} below the extractor minimum '
                f'{self.min_size}x{self.min_size}'
            )

    def extract(self, image: torch.Tensor) -> List[torch.Tensor]:
        raise NotImplementedError()  # pragma: no cover

    def forward(self, image: torch.Tensor) -> List[torch.Tensor]:
        """Activations of an ``N x 3 x H x W`` batch, one tensor per layer."""
        self.check_size(*image.shape[-2:])
        return self.extract(image)

    def layer_shapes(self, height: int, width: int) -> List[LayerShape]:
        """Declared ``(C, H, W)`` of each layer for an input size."""
        blank = torch.zeros(1, 3, height, width, dtype=self._dtype())
        with torch.no_grad():
            return [tuple(a.shape[1:]) for a in self(blank)]  # type: ignore

    def _dtype(self) -> torch.dtype:
        for param in self.parameters():
            return param.dtype
        return torch.get_default_dtype()


class IdentityExtractor(FeatureExtractor):
    """A single layer: the image itself."""

    def __init__(self) -> None:
        super().__init__()
        self.freeze()

    def extract(self, image: torch.Tensor) -> List[torch.Tensor]:
        return [image]


class RandomConvExtractor(FeatureExtractor):
    """Seed-fixed random pyramid of stride-2 3x3 convolutions."""

    def __init__(self, channels: Sequence[int] = (16, 32, 64, 64, 64), seed: int = 0):
        super().__init__()
        if not channels:
            raise ConfigError('perception.channels must not be empty')
        self.min_size = 2 ** (len(channels) - 1)
        layers = []
        previous = 3
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            for width in channels:
                layers.append(
                    nn.Sequential(
                        nn.Conv2d(previous, width, 3, stride=2, padding=1),
                        nn.LeakyReLU(0.2),
                    )
                )
                previous = width
        self.layers = nn.ModuleList(layers)
        self.freeze()

    def extract(self, image: torch.Tensor) -> List[torch.Tensor]:
        activations = []
        x = image
        for layer in self.layers:
            x = layer(x)
            activations.append(x)
        return activations


class VGGExtractor(FeatureExtractor):
    """VGG-19 activations after the given ``features`` indices.

    Requires torchvision. Weights come from `weights_path` when given,
    otherwise from torchvision's ImageNet weights.

    """

    min_size = 32

    def __init__(self, layers: Sequence[int], weights_path: str = '') -> None:
        super().__init__()
        try:
            from torchvision.models import VGG19_Weights, vgg19
        except ImportError:
            raise ConfigError('perception.kind vgg requires torchvision')
        if weights_path:
            vgg = vgg19()
            vgg.load_state_dict(torch.load(weights_path, map_location='cpu'))
        else:
            vgg = vgg19(weights=VGG19_Weights.DEFAULT)
        self.taps = sorted(layers)
        self.features = vgg.features[: self.taps[-1] + 1]
        self.register_buffer(
            'mean', torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)
        )
        self.register_buffer(
            'std', torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1)
        )
        self.freeze()

    def extract(self, image: torch.Tensor) -> List[torch.Tensor]:
        x = (image - self.mean) / self.std
        activations = []
        for i, layer in enumerate(self.features):
            x = layer(x)
            if i in self.taps:
                activations.append(x)
        return activations


def build_extractor(config: ConfigDict) -> FeatureExtractor:
    kind = config['perception.kind']
    if kind == 'identity':
        return IdentityExtractor()
    if kind == 'random':
        return RandomConvExtractor(
            config['perception.channels'], config['perception.seed']
        )
    if kind == 'vgg':
        return VGGExtractor(
            config['perception.vgg.layers'], config['perception.weights']
        )
    raise ConfigError(f'unknown perception.kind: {kind}')


def layer_mask(mask: torch.Tensor, size: Tuple[int, int]) -> torch.Tensor:
    """Average-pool an ``N x 1 x H x W`` mask to an activation's size."""
    if tuple(mask.shape[-2:]) == tuple(size):
        return mask
    return F.adaptive_avg_pool2d(mask, size)


def perceptual_loss(
    fx: FeatureExtractor,
    target: torch.Tensor,
    synthesized: torch.Tensor,
    mask: torch.Tensor,
    target_features: Optional[List[torch.Tensor]] = None,
) -> torch.Tensor:
    """Masked feature-matching loss ``sum_l λ_l sum S_l |V_l(I_t) - V_l(I_s)|``.

    :param target: ``N x 3 x H x W``.
    :param synthesized: ``N x 3 x H x W`` or ``N x K x 3 x H x W``.
    :param mask: ``N x 1 x H x W`` object mask, rescaled per layer by
        average pooling and broadcast over channels.
    :param target_features: Precomputed ``fx(target)``.
    :returns: Loss per sample, shaped ``N`` or ``N x K``.

    """
    batch_shape = synthesized.shape[:-3]
    n = target.shape[0]
    k = synthesized.shape[1] if synthesized.dim() == 5 else 1
    feats_s = fx(synthesized.reshape(-1, *synthesized.shape[-3:]))
    if target_features is None:
        target_features = fx(target)
    mask = mask.reshape(n, 1, *mask.shape[-2:]).to(target.dtype)
    weights = fx.layer_weights
    total = synthesized.new_zeros(n, k)
    for i, (ft, fs) in enumerate(zip(target_features, feats_s)):
        c, h, w = ft.shape[1:]
        weight = weights[i] if weights is not None else 1.0 / (c * h * w)
        s_l = layer_mask(mask, (h, w)).unsqueeze(1)
        diff = (ft.unsqueeze(1) - fs.view(n, k, c, h, w)).abs()
        total = total + weight * (s_l * diff).sum(dim=(2, 3, 4))
    return total.view(batch_shape)
