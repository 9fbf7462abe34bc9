"""Lightweight feature-domain restoration network.

A 3-scale encoder-decoder with multi-scale image injection, slimmed to a
small base channel count. It exposes the six supervised feature taps
(three encoder, three decoder) and an image-shaped restored output; the
first decoder tap doubles as the structural prior for the detector.
"""

import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError


@dataclass
class FddConfig:
    base_channels: int = 2
    blocks_per_stage: int = 2
    scales: int = 3
    in_channels: int = 1
    out_channels: int | None = None  # defaults to in_channels

    def __post_init__(self):
        if self.base_channels < 1 or self.blocks_per_stage < 1:
            raise ConfigError("base_channels and blocks_per_stage must be >= 1")
        if self.scales != 3:
            raise ConfigError("the restoration pyramid is fixed at 3 scales")
        if self.out_channels is None:
            self.out_channels = self.in_channels


@dataclass
class FddTaps:
    """Supervised feature taps: E[i] at full/half/quarter resolution with
    C/2C/4C channels, D[j] mirrored back up; D[0] is the structural prior."""

    E: list = field(default_factory=list)
    D: list = field(default_factory=list)
    restored: torch.Tensor | None = None

    @property
    def prior(self):
        return self.D[0]


class ResidualBlock(nn.Module):
    def __init__(self, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.1))


def residual_stack(channels, n_blocks):
    return nn.Sequential(*[ResidualBlock(channels) for _ in range(n_blocks)])


class ImageInject(nn.Module):
    """Shallow conv module feeding a downsampled input copy into a scale."""

    def __init__(self, in_channels, channels):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv2(F.leaky_relu(self.conv1(x), 0.1))


class FddNet(nn.Module):
    """Encoder-decoder restoration network with feature taps.

    Downsampling is by stride-2 convs, upsampling by transposed convs,
    activations are leaky with slope 0.1 and there are no normalization
    layers. Inputs are reflection-padded to a multiple of 4; taps are
    cropped back to the ceil(size/scale) grid of the original input.
    """

    def __init__(self, config: FddConfig | None = None):
        super().__init__()
        self.config = config or FddConfig()
        c = self.config.base_channels
        cin = self.config.in_channels
        n = self.config.blocks_per_stage

        self.enc1_in = nn.Conv2d(cin, c, 3, padding=1)
        self.enc1 = residual_stack(c, n)
        self.down1 = nn.Conv2d(c, 2 * c, 3, stride=2, padding=1)
        self.inject2 = ImageInject(cin, 2 * c)
        self.fuse2 = nn.Conv2d(4 * c, 2 * c, 1)
        self.enc2 = residual_stack(2 * c, n)
        self.down2 = nn.Conv2d(2 * c, 4 * c, 3, stride=2, padding=1)
        self.inject3 = ImageInject(cin, 4 * c)
        self.fuse3 = nn.Conv2d(8 * c, 4 * c, 1)
        self.enc3 = residual_stack(4 * c, n)

        self.dec1 = residual_stack(4 * c, n)
        self.up1 = nn.ConvTranspose2d(4 * c, 2 * c, 4, stride=2, padding=1)
        self.skip2 = nn.Conv2d(4 * c, 2 * c, 1)
        self.dec2 = residual_stack(2 * c, n)
        self.up2 = nn.ConvTranspose2d(2 * c, c, 4, stride=2, padding=1)
        self.skip3 = nn.Conv2d(2 * c, c, 1)
        self.dec3 = residual_stack(c, n)
        self.out_proj = nn.Conv2d(c, self.config.out_channels, 3, padding=1)

    def forward(self, image) -> FddTaps:
        h, w = image.shape[-2:]
        pad_h = (-h) % 4
        pad_w = (-w) % 4
        x = F.pad(image, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else image
        assert x.shape[-2] % 4 == 0 and x.shape[-1] % 4 == 0

        x2 = F.interpolate(x, scale_factor=0.5, mode="bilinear", align_corners=False)
        x4 = F.interpolate(x, scale_factor=0.25, mode="bilinear", align_corners=False)

        e1 = self.enc1(F.leaky_relu(self.enc1_in(x), 0.1))
        t = F.leaky_relu(self.down1(e1), 0.1)
        e2 = self.enc2(self.fuse2(torch.cat([t, self.inject2(x2)], dim=1)))
        t = F.leaky_relu(self.down2(e2), 0.1)
        e3 = self.enc3(self.fuse3(torch.cat([t, self.inject3(x4)], dim=1)))

        d1 = self.dec1(e3)
        t = F.leaky_relu(self.up1(d1), 0.1)
        d2 = self.dec2(self.skip2(torch.cat([t, e2], dim=1)))
        t = F.leaky_relu(self.up2(d2), 0.1)
        d3 = self.dec3(self.skip3(torch.cat([t, e1], dim=1)))

        # bounded correction: without it the detection gradient can pump
        # image amplitude without limit (no normalization anywhere downstream)
        restored = torch.tanh(self.out_proj(d3))
        if self.config.out_channels == self.config.in_channels:
            restored = restored + x

        h2, w2 = math.ceil(h / 2), math.ceil(w / 2)
        h4, w4 = math.ceil(h / 4), math.ceil(w / 4)
        return FddTaps(
            E=[e1[..., :h, :w], e2[..., :h2, :w2], e3[..., :h4, :w4]],
            D=[d1[..., :h4, :w4], d2[..., :h2, :w2], d3[..., :h, :w]],
            restored=restored[..., :h, :w],
        )


def count_parameters(module):
    """Exact number of learnable scalars in a module."""
    return sum(p.numel() for p in module.parameters() if p.requires_grad)
