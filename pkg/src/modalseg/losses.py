"""Training objectives: staged segmentation loss, discriminator, similarity.

The segmentation loss is a per-pixel cross-entropy averaged within each
output stage and summed over stages, evaluated once on the full-channel
forward pass and once on the dropped-channel pass.

The similarity term is adversarial. A small convolutional discriminator sees
bottleneck feature maps; it is trained to output 1 on maps produced from
dropped-channel input and 0 on full-channel maps scaled by (C-1)/C, which is
the expected ratio between the two under uniform single-channel drop. The
generator side pushes the scaled full-channel maps toward the dropped
distribution through a non-saturating loss whose gradients reach only the
segmentation parameters; the discriminator is frozen inside it.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .model import _fill_parameters

LOGIT_CLIP = 30.0  # keeps discriminator outputs strictly inside (0, 1)


class NonFiniteLossError(RuntimeError):
    """A loss component evaluated to NaN or infinity."""

    def __init__(self, component: str, step: int | None = None):
        self.component = component
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite loss component {component!r}{where}")


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0  # weight of the dropped-channel segmentation loss
    beta: float = 0.1  # weight of the adversarial similarity loss
    prob_floor: float = 1e-7  # clamp applied to probabilities before log

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")
        if not 0 < self.prob_floor < 1:
            raise ValueError("prob_floor must lie in (0, 1)")


def downsample_labels(labels, factor: int):
    """Nearest-neighbor label downsampling taking each block's top-left pixel.

    Works on numpy arrays and torch tensors of shape (..., H, W); ``factor``
    must be a power of two dividing both spatial dimensions.
    """
    if factor < 1 or factor & (factor - 1):
        raise ValueError("factor must be a positive power of two")
    h, w = labels.shape[-2], labels.shape[-1]
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide {h}x{w}")
    return labels[..., ::factor, ::factor]


def stage_labels(labels, num_stages: int) -> list:
    """Labels at every stage resolution, coarsest first; the last is identity."""
    return [downsample_labels(labels, 2 ** (num_stages - k)) for k in range(1, num_stages + 1)]


def seg_loss(probabilities, labels, prob_floor: float = 1e-7) -> torch.Tensor:
    """Cross-entropy of staged softmax maps against staged integer labels.

    Per stage the negative log of the true-class probability (clamped below
    by ``prob_floor``) is averaged over batch and pixels; stages are summed.
    """
    if len(probabilities) != len(labels):
        raise ValueError("stage counts of predictions and labels differ")
    total = None
    for probs, y in zip(probabilities, labels):
        if probs.dim() == 3:
            probs = probs.unsqueeze(0)
        if y.dim() == probs.dim() - 2:
            y = y.unsqueeze(0)
        if y.shape != probs.shape[:1] + probs.shape[2:]:
            raise ValueError(
                f"labels {tuple(y.shape)} do not match probabilities {tuple(probs.shape)}"
            )
        picked = probs.gather(1, y.long().unsqueeze(1)).squeeze(1)
        term = -picked.clamp(min=prob_floor).log().mean()
        total = term if total is None else total + term
    if not torch.isfinite(total):
        raise NonFiniteLossError("seg_loss")
    return total


class Discriminator(nn.Module):
    """Maps a bottleneck feature map to a probability strictly inside (0, 1).

    Two stride-2 convolutions, global average pooling, and an affine output
    whose logit is clipped to +-LOGIT_CLIP before the sigmoid. Losses read
    the clipped logits directly (log-sigmoid form) because the float32
    sigmoid saturates to exactly 1.0 already at logit 30.
    """

    def __init__(self, in_channels: int, widths: tuple[int, int] = (32, 64), leak: float = 0.01):
        super().__init__()
        self.leak = leak
        self.conv1 = nn.Conv2d(in_channels, widths[0], 3, stride=2, padding=1)
        self.conv2 = nn.Conv2d(widths[0], widths[1], 3, stride=2, padding=1)
        self.out = nn.Linear(widths[1], 1)

    def logits(self, f0: torch.Tensor) -> torch.Tensor:
        """Clipped pre-sigmoid outputs, shape (B,)."""
        if f0.dim() != 4 or f0.shape[1] != self.conv1.in_channels:
            raise ValueError("expected a (B, C_bottleneck, h, w) feature map")
        x = F.leaky_relu(self.conv1(f0), self.leak)
        x = F.leaky_relu(self.conv2(x), self.leak)
        logit = self.out(x.mean(dim=(2, 3))).squeeze(1)
        return logit.clamp(-LOGIT_CLIP, LOGIT_CLIP)

    def forward(self, f0: torch.Tensor) -> torch.Tensor:
        """Probability per batch element, shape (B,)."""
        return torch.sigmoid(self.logits(f0))


def init_discriminator(
    in_channels: int, seed: int, dtype: torch.dtype = torch.float32
) -> Discriminator:
    """Discriminator with parameters drawn deterministically from the seed."""
    disc = Discriminator(in_channels)
    _fill_parameters(disc, np.random.Generator(np.random.PCG64(seed)), dtype)
    return disc


@contextmanager
def frozen(module: nn.Module):
    """Temporarily exclude a module's parameters from gradient tracking."""
    flags = [p.requires_grad for p in module.parameters()]
    try:
        for p in module.parameters():
            p.requires_grad_(False)
        yield module
    finally:
        for p, flag in zip(module.parameters(), flags):
            p.requires_grad_(flag)


def drop_scale(num_channels: int) -> float:
    """Expected ratio between dropped and full bottleneck maps, (C-1)/C."""
    if num_channels < 2:
        raise ValueError("similarity loss needs at least two channels")
    return (num_channels - 1) / num_channels


def adversarial_bce(disc, real: torch.Tensor, fake: torch.Tensor) -> torch.Tensor:
    """-[log D(real) + log(1 - D(fake))], averaged over the batch.

    Evaluated as -[logsigmoid(z_real) + logsigmoid(-z_fake)] on the clipped
    logits, which stays finite in float32 where the sigmoid saturates.
    """
    return -(F.logsigmoid(disc.logits(real)) + F.logsigmoid(-disc.logits(fake))).mean()


def generator_loss(disc, fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating -log D(fake); wrap in ``frozen(disc)`` when training."""
    return -F.logsigmoid(disc.logits(fake)).mean()


def similarity_losses(
    disc: Discriminator,
    f0_full: torch.Tensor,
    f0_drop: torch.Tensor,
    num_channels: int,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Discriminator and generator sides of the bottleneck similarity loss.

    The full-channel map is scaled by (C-1)/C before the discriminator sees
    it. ``d_loss`` treats dropped maps as real and scaled-full maps as fake,
    with both inputs detached so its gradient reaches only the discriminator.
    ``g_loss`` is the non-saturating -log D(scaled full) with the
    discriminator frozen, so its gradient reaches only the parameters that
    produced ``f0_full``.
    """
    scaled_full = drop_scale(num_channels) * f0_full
    d_loss = adversarial_bce(disc, f0_drop.detach(), scaled_full.detach())
    with frozen(disc):
        g_loss = generator_loss(disc, scaled_full)
    for name, value in (("d_loss", d_loss), ("g_loss", g_loss)):
        if not torch.isfinite(value):
            raise NonFiniteLossError(name)
    return d_loss, g_loss


def total_loss(loss_full, loss_drop, g_loss, cfg: LossConfig):
    """Weighted training objective: full + alpha * drop + beta * generator."""
    total = loss_full + cfg.alpha * loss_drop + cfg.beta * g_loss
    if not torch.isfinite(torch.as_tensor(total)):
        raise NonFiniteLossError("total")
    return total
