"""Background, adversarial and min-over-K objectives.

Losses are computed per sample so that the diversity combination can select
the best of the K outputs independently for every image of a batch. Images
are ``N x 3 x H x W`` (targets) or ``N x K x 3 x H x W`` (synthesized
outputs); masks are ``N x 1 x H x W`` with 1 on object pixels.

Discriminator losses are binary cross-entropies per logit cell. The object
mask is average-pooled to the logit map, giving the soft fraction of each
patch covered by the synthesized object.

"""
from dataclasses import dataclass
from typing import Any, Dict, Optional, Union

import torch
import torch.nn.functional as F

from .perception import layer_mask


def _as_batched(images: torch.Tensor) -> torch.Tensor:
    """View N x 3 x H x W or N x K x 3 x H x W images as N x K x 3 x H x W."""
    return images if images.dim() == 5 else images.unsqueeze(1)


def background_loss(
    target: torch.Tensor, synthesized: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Mean absolute difference over background pixels and channels.

    :returns: Loss per sample, shaped ``N`` or ``N x K`` like `synthesized`.
        Samples without background pixels have loss 0.

    """
    batch_shape = synthesized.shape[:-3]
    synthesized = _as_batched(synthesized)
    n = target.shape[0]
    background = (1 - mask.reshape(n, 1, 1, *mask.shape[-2:])).to(target.dtype)
    diff = (target.unsqueeze(1) - synthesized).abs()
    total = (background * diff).sum(dim=(2, 3, 4))
    count = 3 * background.sum(dim=(2, 3, 4))
    loss = torch.where(count > 0, total / count.clamp(min=1), torch.zeros_like(total))
    return loss.view(batch_shape)


def cell_occupancy(mask: torch.Tensor, logits: torch.Tensor) -> torch.Tensor:
    """Soft object occupancy ``N x 1 x h x w`` of each logit cell."""
    n = mask.shape[0]
    mask = mask.reshape(n, 1, *mask.shape[-2:]).to(logits.dtype)
    return layer_mask(mask, tuple(logits.shape[-2:]))  # type: ignore


def adversarial_d_loss(
    logits_fake: torch.Tensor, logits_real: torch.Tensor, mask: torch.Tensor
) -> torch.Tensor:
    """Discriminator loss segmenting synthesized images into real and fake.

    Cells of the synthesized image are pushed toward ``1 - occupancy`` (fake
    where the object is, real elsewhere) and cells of the real image toward
    1. The two mean cross-entropies are averaged.

    :param logits_fake: ``N x 1 x h x w`` logits of synthesized images.
    :param logits_real: ``M x 1 x h x w`` logits of real images.
    :param mask: ``N x 1 x H x W`` object masks of the synthesized images.

    """
    fake_targets = 1 - cell_occupancy(mask, logits_fake)
    fake = F.binary_cross_entropy_with_logits(logits_fake, fake_targets)
    real = F.binary_cross_entropy_with_logits(
        logits_real, torch.ones_like(logits_real)
    )
    return (fake + real) / 2


def adversarial_g_loss(logits_fake: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Generator loss rewarding object patches the discriminator calls real.

    Per-cell cross-entropy toward "real", weighted by object occupancy and
    normalized by the total occupancy. Background cells do not contribute.

    :param logits_fake: ``N x 1 x h x w`` or ``N x K x 1 x h x w`` logits.
    :param mask: ``N x 1 x H x W`` object masks.
    :returns: Loss per sample, shaped ``N`` or ``N x K``. Samples with an
        empty mask have loss 0.

    """
    batch_shape = logits_fake.shape[:-3]
    logits = _as_batched(logits_fake)
    n, k = logits.shape[:2]
    occupancy = cell_occupancy(mask, logits).unsqueeze(1)
    bce = F.binary_cross_entropy_with_logits(
        logits, torch.ones_like(logits), reduction='none'
    )
    total = (occupancy * bce).sum(dim=(2, 3, 4))
    area = occupancy.sum(dim=(2, 3, 4)).expand(n, k)
    loss = torch.where(area > 0, total / area.clamp(min=1e-12), torch.zeros_like(total))
    return loss.view(batch_shape)


@dataclass
class LossBundle:
    """Per-output losses of a batch and their min-over-K combination.

    Every per-output tensor is ``N x K``; `k_star`, `weight` and `degenerate`
    hold one value per image. `total` is the batch mean of the per-image
    combined losses and is the quantity back-propagated.

    """

    perceptual: torch.Tensor
    adversarial: torch.Tensor
    background: torch.Tensor
    k_star: torch.Tensor
    weight: torch.Tensor
    per_image: torch.Tensor
    total: torch.Tensor
    #: Images whose mask has no foreground pixel.
    degenerate: torch.Tensor

    @property
    def k(self) -> int:
        return self.perceptual.shape[1]

    def _selected(self, losses: torch.Tensor) -> torch.Tensor:
        return losses.gather(1, self.k_star.unsqueeze(1)).squeeze(1)

    def summary(self) -> Dict[str, Any]:
        """Scalar metrics of the bundle, averaged over the batch."""
        with torch.no_grad():
            return {
                'loss': float(self.total),
                'perceptual': float(self._selected(self.perceptual).mean()),
                'adversarial': float(self._selected(self.adversarial).mean()),
                'background': float(self.background.mean()),
                'k_star': [int(k) for k in self.k_star],
                'weight': float(self.weight.mean()),
                'degenerate': int(self.degenerate.sum()),
            }


def foreground_weight(mask: torch.Tensor, rho: float = 0.1) -> torch.Tensor:
    """Per-image weight ``min(1, rho * H * W / |S|)``; 0 for an empty mask."""
    n = mask.shape[0]
    flat = mask.reshape(n, -1)
    area = (flat > 0.5).sum(dim=1).to(torch.get_default_dtype())
    pixels = flat.shape[1]
    weight = (rho * pixels / area.clamp(min=1)).clamp(max=1)
    return torch.where(area > 0, weight, torch.zeros_like(area))


def combine_diversity(
    perceptual: torch.Tensor,
    adversarial: Optional[torch.Tensor],
    background: torch.Tensor,
    mask: torch.Tensor,
    rho: float = 0.1,
    weight: Optional[Union[float, torch.Tensor]] = None,
) -> LossBundle:
    """Combine the K outputs' losses into the min-over-K objective.

    Per image, ``k* = argmin_k (L^P_k + L^A_k)`` with ties going to the
    lowest index, and the combined loss is
    ``w * (L^P_k* + L^A_k*) + (1 - w) * mean_k L^B_k``. Only the selected
    output receives foreground gradient; every output receives background
    gradient.

    :param perceptual: ``N x K`` (or ``K`` for a single image).
    :param adversarial: Same shape as `perceptual`; None for no adversary.
    :param background: Same shape as `perceptual`.
    :param mask: ``N x 1 x H x W`` (or ``H x W``) object masks.
    :param rho: Scale of the foreground weight.
    :param weight: Explicit per-image weight overriding the mask formula.

    """
    if perceptual.dim() == 1:
        perceptual = perceptual.unsqueeze(0)
        background = background.unsqueeze(0)
        if adversarial is not None:
            adversarial = adversarial.unsqueeze(0)
        mask = mask.reshape(1, 1, *mask.shape[-2:])
    if perceptual.shape[1] < 1:
        raise ValueError('at least one output is required')
    if adversarial is None:
        adversarial = torch.zeros_like(perceptual)
    if perceptual.shape != background.shape or perceptual.shape != adversarial.shape:
        raise ValueError(
            f'loss shapes disagree: {tuple(perceptual.shape)}, '
            f'{tuple(adversarial.shape)}, {tuple(background.shape)}'
        )
    n = perceptual.shape[0]
    degenerate = ~(mask.reshape(n, -1) > 0.5).any(dim=1)
    foreground = perceptual + adversarial
    k_star = torch.argmin(foreground.detach(), dim=1)
    k_star = torch.where(degenerate, torch.zeros_like(k_star), k_star)
    if weight is None:
        w = foreground_weight(mask, rho)
    else:
        w = torch.as_tensor(weight, dtype=torch.get_default_dtype()).expand(n)
        w = torch.where(degenerate, torch.zeros_like(w), w)
    w = w.to(device=perceptual.device, dtype=perceptual.dtype)
    selected = foreground.gather(1, k_star.unsqueeze(1)).squeeze(1)
    per_image = w * selected + (1 - w) * background.mean(dim=1)
    return LossBundle(
        perceptual=perceptual,
        adversarial=adversarial,
        background=background,
        k_star=k_star,
        weight=w,
        per_image=per_image,
        total=per_image.mean(),
        degenerate=degenerate,
    )
