"""Channel-separate encoder U-Net with summed fusion and staged outputs.

Every input channel runs through its own encoder; the per-channel feature
maps join the shared decoder only through bias-free fusion convolutions
(bottleneck and skip), so a channel excluded by the availability mask
contributes exactly zero to the decoder. That makes masked inference
identical to zeroing the channel's encoder output, and makes the bottleneck
sum linear over channels: summing the C single-drop bottlenecks equals
(C - 1) times the full one.

The decoder upsamples in L stages; each stage except the last also fuses the
encoder features of matching resolution, and each stage emits a softmax
class-probability map through its own 1x1 head. Stage k runs at 1/2^(L-k)
of the input resolution, so the last stage is full resolution.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .dataio import ChannelMask


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 4
    classes: int = 4
    height: int = 64
    width: int = 64
    encoder_widths: tuple[int, ...] = (16, 32, 64)
    bottleneck_width: int = 64
    leak: float = 0.01  # negative slope of the leaky rectifier
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "encoder_widths", tuple(self.encoder_widths))
        if self.channels < 1 or self.classes < 2:
            raise ValueError("need at least one channel and two classes")
        if self.levels < 1 or any(w < 1 for w in self.encoder_widths):
            raise ValueError("encoder widths must be a nonempty positive sequence")
        if self.bottleneck_width < 1:
            raise ValueError("bottleneck width must be positive")
        scale = 2**self.levels
        if self.height % scale or self.width % scale:
            raise ValueError(
                f"input {self.height}x{self.width} not divisible by 2^{self.levels}"
            )

    @property
    def levels(self) -> int:
        return len(self.encoder_widths)

    def encoder_level_width(self, level: int) -> int:
        """Width of encoder output at level ``level`` (0 = deepest)."""
        return self.encoder_widths[self.levels - 1 - level]

    def stage_width(self, stage: int) -> int:
        """Decoder width at stage ``stage`` in 1..L.

        Stages with a matching encoder level mirror that level's width; the
        final full-resolution stage continues with the first encoder width.
        """
        if stage < self.levels:
            return self.encoder_level_width(stage)
        return self.encoder_widths[0]

    def to_dict(self) -> dict:
        return {
            "channels": self.channels,
            "classes": self.classes,
            "height": self.height,
            "width": self.width,
            "encoder_widths": list(self.encoder_widths),
            "bottleneck_width": self.bottleneck_width,
            "leak": self.leak,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        data = dict(data)
        data["encoder_widths"] = tuple(data["encoder_widths"])
        return cls(**data)


@dataclass
class StagedPrediction:
    """Per-stage softmax maps plus the decoder features that produced them.

    ``probabilities[k-1]`` is the stage-k map of shape (B, K, H/2^(L-k),
    W/2^(L-k)); ``features`` holds [f_0 .. f_L] where f_0 is the raw
    (pre-activation) bottleneck sum retained for the adaptation loss.
    """

    probabilities: list = field(default_factory=list)
    features: list = field(default_factory=list)

    @property
    def bottleneck(self) -> torch.Tensor:
        return self.features[0]

    @property
    def final(self) -> torch.Tensor:
        return self.probabilities[-1]


class ChannelEncoder(nn.Module):
    """Downsampling path for one channel; no cross-channel parameters.

    Each level applies a 3x3 stride-1 convolution and a 3x3 stride-2
    convolution, both followed by the leaky rectifier. The first convolution
    carries no bias so an all-zero image produces an all-zero first
    pre-activation; later convolutions keep their biases.
    """

    def __init__(self, widths: Sequence[int], leak: float):
        super().__init__()
        self.leak = leak
        refine, down = [], []
        in_width = 1
        for index, width in enumerate(widths):
            refine.append(nn.Conv2d(in_width, width, 3, padding=1, bias=index > 0))
            down.append(nn.Conv2d(width, width, 3, stride=2, padding=1))
            in_width = width
        self.refine = nn.ModuleList(refine)
        self.down = nn.ModuleList(down)

    def forward(self, image: torch.Tensor) -> list:
        """Encode a (B, 1, H, W) image into per-level features, deepest first."""
        features = []
        x = image
        for refine, down in zip(self.refine, self.down):
            x = F.leaky_relu(refine(x), self.leak)
            x = F.leaky_relu(down(x), self.leak)
            features.append(x)
        features.reverse()
        return features


class ChannelSeparateUNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c, levels = config.channels, config.levels
        deep_width = config.encoder_widths[-1]

        self.encoders = nn.ModuleList(
            ChannelEncoder(config.encoder_widths, config.leak) for _ in range(c)
        )
        # Bias-free fusion kernels: masked channels must contribute exact zeros.
        self.fusion = nn.ModuleList(
            nn.Conv2d(deep_width, config.bottleneck_width, 3, padding=1, bias=False)
            for _ in range(c)
        )
        self.skips = nn.ModuleList(
            nn.ModuleList(
                nn.Conv2d(
                    config.encoder_level_width(stage),
                    config.stage_width(stage),
                    3,
                    padding=1,
                    bias=False,
                )
                for _ in range(c)
            )
            for stage in range(1, levels)
        )
        widths = [config.bottleneck_width] + [
            config.stage_width(stage) for stage in range(1, levels + 1)
        ]
        self.upsamplers = nn.ModuleList(
            nn.ConvTranspose2d(widths[stage - 1], widths[stage], 4, stride=2, padding=1)
            for stage in range(1, levels + 1)
        )
        self.heads = nn.ModuleList(
            nn.Conv2d(widths[stage], config.classes, 1)
            for stage in range(1, levels + 1)
        )

    @property
    def dtype(self) -> torch.dtype:
        return self.heads[0].weight.dtype

    def _check_mask(self, mask: Optional[ChannelMask]) -> ChannelMask:
        if mask is None:
            return ChannelMask.full(self.config.channels)
        if mask.num_channels != self.config.channels:
            raise ValueError("mask length does not match the channel count")
        return mask

    def encode_channel(self, channel: int, image: torch.Tensor) -> list:
        """Per-level features of one channel, deepest first.

        Independent of every other channel's input and parameters.
        """
        if image.dim() != 4 or image.shape[1] != 1:
            raise ValueError("expected a (B, 1, H, W) image batch")
        if image.shape[-2:] != (self.config.height, self.config.width):
            raise ValueError(
                f"image is {tuple(image.shape[-2:])}, model expects "
                f"{(self.config.height, self.config.width)}"
            )
        return self.encoders[channel](image)

    def encode(self, x: torch.Tensor, mask: Optional[ChannelMask] = None) -> list:
        """Encode available channels of a (B, C, H, W) batch; None elsewhere."""
        mask = self._check_mask(mask)
        if x.dim() != 4 or x.shape[1] != self.config.channels:
            raise ValueError("expected a (B, C, H, W) batch matching the config")
        return [
            self.encode_channel(c, x[:, c : c + 1]) if keep else None
            for c, keep in enumerate(mask.available)
        ]

    def fuse_bottleneck(
        self, encoded: Sequence, mask: Optional[ChannelMask] = None
    ) -> torch.Tensor:
        """Sum of per-channel bottleneck convolutions over available channels."""
        mask = self._check_mask(mask)
        f0 = None
        for c in mask.indices():
            if encoded[c] is None:
                raise ValueError(f"channel {c} is available but was not encoded")
            term = self.fusion[c](encoded[c][0])
            f0 = term if f0 is None else f0 + term
        return f0

    def decode_stage(
        self,
        stage: int,
        f_prev: torch.Tensor,
        encoded: Sequence,
        mask: Optional[ChannelMask] = None,
    ) -> torch.Tensor:
        """One decoder stage: upsample 2x, add available skips, rectify.

        The final stage has no encoder level at its resolution and therefore
        no skip terms.
        """
        mask = self._check_mask(mask)
        pre = self.upsamplers[stage - 1](f_prev)
        if stage < self.config.levels:
            for c in mask.indices():
                skip = self.skips[stage - 1][c](encoded[c][stage])
                if skip.shape[-2:] != pre.shape[-2:]:
                    raise ValueError(
                        f"stage {stage}: upsampled {tuple(pre.shape[-2:])} does not "
                        f"match skip {tuple(skip.shape[-2:])}"
                    )
                pre = pre + skip
        return F.leaky_relu(pre, self.config.leak)

    def stage_head(self, stage: int, f_stage: torch.Tensor) -> torch.Tensor:
        """Per-pixel class probabilities from a 1x1 convolution and softmax."""
        return F.softmax(self.heads[stage - 1](f_stage), dim=1)

    def decode(
        self, encoded: Sequence, mask: Optional[ChannelMask] = None
    ) -> StagedPrediction:
        mask = self._check_mask(mask)
        f = self.fuse_bottleneck(encoded, mask)
        prediction = StagedPrediction(features=[f])
        for stage in range(1, self.config.levels + 1):
            f = self.decode_stage(stage, f, encoded, mask)
            prediction.features.append(f)
            prediction.probabilities.append(self.stage_head(stage, f))
        return prediction

    def forward(
        self, x: torch.Tensor, mask: Optional[ChannelMask] = None
    ) -> StagedPrediction:
        """Masked forward pass; only available channels are encoded and fused."""
        mask = self._check_mask(mask)
        return self.decode(self.encode(x, mask), mask)


def _fill_parameters(module: nn.Module, rng: np.random.Generator, dtype) -> None:
    """Deterministically fill weights fan-in-scaled uniform and biases zero.

    Values are drawn in float64 in module registration order and cast once,
    so a seed pins down the same underlying values for any supported dtype.
    """
    module.to(dtype)
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            weight = m.weight
            if isinstance(m, nn.ConvTranspose2d):
                fan_in = weight.shape[0] * weight.shape[2] * weight.shape[3]
            elif isinstance(m, nn.Conv2d):
                fan_in = weight.shape[1] * weight.shape[2] * weight.shape[3]
            else:
                fan_in = weight.shape[1]
            bound = float(np.sqrt(6.0 / fan_in))
            values = rng.uniform(-bound, bound, size=tuple(weight.shape))
            with torch.no_grad():
                weight.copy_(torch.from_numpy(values))
                if m.bias is not None:
                    m.bias.zero_()


def init_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> ChannelSeparateUNet:
    """Build the network with parameters drawn deterministically from the seed."""
    net = ChannelSeparateUNet(config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    _fill_parameters(net, rng, dtype)
    return net
