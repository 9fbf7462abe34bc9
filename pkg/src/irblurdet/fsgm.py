"""Frequency structure guidance: refine the restoration prior and inject it.

The refine block high-pass filters the prior in the Fourier domain with a
learnable radial cutoff, then applies two partial-compression attentions.
The integration block fuses the refined prior into stem features through
channel-wise cross attention with 5x5/7x7 dynamic-kernel gates.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigError, InvalidParameterError


@dataclass
class FsgmConfig:
    d: int | None = None  # projection channels, defaults to stem channels
    k_small: int = 5
    k_large: int = 7
    residual_kernel: int = 3
    tau_init: float = 0.5
    sharpness: float = 50.0


class HighPassFilter(nn.Module):
    """Learnable radial high-pass gate applied in the 2-D Fourier domain.

    The gate is sigmoid(sharpness * (r - tau)) over the normalized radius
    r = sqrt((2u/U)^2 + (2v/V)^2) / sqrt(2) of centered frequency indices,
    so tau = 0.5 cuts at half the maximal radial frequency. A smooth gate
    keeps tau trainable; a hard mask would have zero gradient.
    """

    def __init__(self, tau=0.5, sharpness=50.0):
        super().__init__()
        self.tau = nn.Parameter(torch.tensor(float(tau)))
        self.sharpness = float(sharpness)

    def gate(self, h, w, device=None, dtype=None):
        fy = torch.fft.fftfreq(h, device=device, dtype=dtype) * 2.0
        fx = torch.fft.fftfreq(w, device=device, dtype=dtype) * 2.0
        r = torch.sqrt(fy[:, None] ** 2 + fx[None, :] ** 2) / math.sqrt(2.0)
        return torch.sigmoid(self.sharpness * (r - self.tau))

    def forward(self, x):
        return high_pass(x, self)


def high_pass(x, filt: HighPassFilter):
    """Per-channel FFT -> radial gate -> inverse FFT -> real part."""
    h, w = x.shape[-2:]
    gate = filt.gate(h, w, device=x.device, dtype=x.dtype)
    spec = torch.fft.fft2(x)
    return torch.fft.ifft2(spec * gate).real


class SpatialChannelAttention(nn.Module):
    """Gate from a depthwise stride-2 conv re-expanded by a depthwise
    transposed conv; the gate keeps full spatial extent (no global pooling)."""

    def __init__(self, channels):
        super().__init__()
        self.down = nn.Conv2d(channels, channels, 3, stride=2, padding=1, groups=channels)
        self.up = nn.ConvTranspose2d(channels, channels, 4, stride=2, padding=1, groups=channels)

    def forward(self, x):
        h, w = x.shape[-2:]
        pad_h, pad_w = h % 2, w % 2
        xp = F.pad(x, (0, pad_w, 0, pad_h), mode="reflect") if (pad_h or pad_w) else x
        g = torch.sigmoid(self.up(self.down(xp)))
        return x * g[..., :h, :w]


class ChannelSpatialAttention(nn.Module):
    """Gate from a pointwise bottleneck C -> max(C/2, 1) -> C."""

    def __init__(self, channels):
        super().__init__()
        mid = max(channels // 2, 1)
        self.pw1 = nn.Conv2d(channels, mid, 1)
        self.pw2 = nn.Conv2d(mid, channels, 1)

    def forward(self, x):
        return x * torch.sigmoid(self.pw2(self.pw1(x)))


class FrequencyRefineBlock(nn.Module):
    """High-pass filtering followed by the sum of the two attentions."""

    def __init__(self, channels, config: FsgmConfig):
        super().__init__()
        self.high_pass = HighPassFilter(config.tau_init, config.sharpness)
        self.sca = SpatialChannelAttention(channels)
        self.csa = ChannelSpatialAttention(channels)

    def refine(self, p_high):
        return self.sca(p_high) + self.csa(p_high)

    def forward(self, prior):
        return self.refine(self.high_pass(prior))


class StructurePriorIntegration(nn.Module):
    """Cross-attention fusion of the refined prior into stem features.

    Queries and values come from the features, keys from the prior; the
    channel-wise attention output is split in two, gated by sigmoid
    depthwise 5x5/7x7 convs, Hadamard-multiplied with the matching value
    splits, concatenated, and added to a 3x3 conv residual of the features.
    """

    def __init__(self, prior_channels, feat_channels, config: FsgmConfig):
        super().__init__()
        d = config.d if config.d is not None else feat_channels
        if d % 2 != 0:
            raise ConfigError(f"projection width must be even, got {d}")
        self.d = d
        self.proj_q = nn.Conv2d(feat_channels, d, 1)
        self.proj_k = nn.Conv2d(prior_channels, d, 1)
        self.proj_v = nn.Conv2d(feat_channels, d, 1)
        half = d // 2
        self.gate_small = nn.Conv2d(half, half, config.k_small, padding=config.k_small // 2, groups=half)
        self.gate_large = nn.Conv2d(half, half, config.k_large, padding=config.k_large // 2, groups=half)
        self.residual = nn.Conv2d(
            feat_channels, d, config.residual_kernel, padding=config.residual_kernel // 2
        )

    def forward(self, p_refined, f):
        if p_refined.shape[-2:] != f.shape[-2:]:
            raise InvalidParameterError(
                f"spib: prior {tuple(p_refined.shape[-2:])} and features "
                f"{tuple(f.shape[-2:])} disagree spatially"
            )
        b, _, h, w = f.shape
        q = self.proj_q(f).flatten(2)  # (B, d, HW)
        k = self.proj_k(p_refined).flatten(2)
        v = self.proj_v(f)
        attn = torch.softmax(q @ k.transpose(1, 2) / math.sqrt(h * w), dim=-1)  # (B, d, d)
        m = (attn @ v.flatten(2)).reshape(b, self.d, h, w)
        m1, m2 = m.chunk(2, dim=1)
        a1 = torch.sigmoid(self.gate_small(m1))
        a2 = torch.sigmoid(self.gate_large(m2))
        v1, v2 = v.chunk(2, dim=1)
        return torch.cat([a1 * v1, a2 * v2], dim=1) + self.residual(f)


class FrequencyStructureGuidance(nn.Module):
    """refine(high_pass(P)) fused into the stem features."""

    def __init__(self, prior_channels, feat_channels, config: FsgmConfig | None = None):
        super().__init__()
        config = config or FsgmConfig()
        self.ffrb = FrequencyRefineBlock(prior_channels, config)
        self.spib = StructurePriorIntegration(prior_channels, feat_channels, config)

    @property
    def tau(self):
        return self.ffrb.high_pass.tau

    def forward(self, prior, f):
        if prior.shape[-2:] != f.shape[-2:]:
            raise InvalidParameterError(
                f"fsgm: prior {tuple(prior.shape[-2:])} and features "
                f"{tuple(f.shape[-2:])} must share the 1/4 resolution"
            )
        return self.spib(self.ffrb(prior), f)
