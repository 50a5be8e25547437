"""Differentiable building blocks shared by the sync network and the extractor.

Tensors are channels-first: ``(batch, channels, frames)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class TcnSpec:
    """One TCN block: ``in_channels`` is the residual (bottleneck) width."""

    in_channels: int = 256
    hidden_channels: int = 512
    kernel: int = 3
    dilation: int = 1

    def __post_init__(self):
        if self.kernel % 2 == 0:
            raise ValueError(f"kernel must be odd, got {self.kernel}")
        d = self.dilation
        if d < 1 or d & (d - 1):
            raise ValueError(f"dilation must be a power of two >= 1, got {d}")
        if self.in_channels < 1 or self.hidden_channels < 1:
            raise ValueError("channel counts must be positive")


class GlobalLayerNorm(nn.Module):
    """Layer normalization over (channels, frames) of each sample, per-channel affine."""

    def __init__(self, channels: int, eps: float = 1e-8):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return self.gamma * (x - mean) / torch.sqrt(var + self.eps) + self.beta


class TemporalNorm(nn.Module):
    """Standardizes each channel of one sample over its frames, with per-channel affine.

    Statistics come from the sample alone (no batch coupling). Used at the end of the
    visual front-end: the face is mostly static, so lip motion is a small ripple on a
    large per-channel offset until the offset is removed and the ripple rescaled.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        mean = x.mean(dim=-1, keepdim=True)
        var = ((x - mean) ** 2).mean(dim=-1, keepdim=True)
        return self.gamma * (x - mean) / torch.sqrt(var + self.eps) + self.beta


def layer_norm_2d(channels: int) -> nn.GroupNorm:
    # a single group normalizes each image over (C, H, W): layer norm, no batch statistics
    return nn.GroupNorm(1, channels)


class TCNBlock(nn.Module):
    """Residual block: 1x1 conv, PReLU, gLN, dilated depthwise conv, PReLU, gLN, 1x1 conv.

    With ``zero_init`` the output convolution starts at zero so the block is the identity.
    """

    def __init__(self, spec: TcnSpec, zero_init: bool = False):
        super().__init__()
        self.spec = spec
        c, h, k, d = spec.in_channels, spec.hidden_channels, spec.kernel, spec.dilation
        self.conv_in = nn.Conv1d(c, h, 1)
        self.act1 = nn.PReLU()
        self.norm1 = GlobalLayerNorm(h)
        self.dconv = nn.Conv1d(h, h, k, padding=d * (k - 1) // 2, dilation=d, groups=h)
        self.act2 = nn.PReLU()
        self.norm2 = GlobalLayerNorm(h)
        self.conv_out = nn.Conv1d(h, c, 1)
        if zero_init:
            nn.init.zeros_(self.conv_out.weight)
            nn.init.zeros_(self.conv_out.bias)

    def forward(self, x):
        if x.shape[1] != self.spec.in_channels:
            raise ValueError(
                f"TCN block expects {self.spec.in_channels} channels, got {x.shape[1]}"
            )
        y = self.norm1(self.act1(self.conv_in(x)))
        y = self.norm2(self.act2(self.dconv(y)))
        return x + self.conv_out(y)


def tcn_stack(
    channels: int,
    hidden: int,
    n_blocks: int,
    kernel: int = 3,
    dilated: bool = True,
    zero_init: bool = False,
) -> nn.Sequential:
    """``n_blocks`` TCN blocks with dilations 1, 2, 4, ... (or all 1 when ``dilated`` is off)."""
    return nn.Sequential(
        *[
            TCNBlock(TcnSpec(channels, hidden, kernel, 2**b if dilated else 1), zero_init)
            for b in range(n_blocks)
        ]
    )


def receptive_field(kernel: int, dilations: Sequence[int]) -> int:
    return 1 + (kernel - 1) * sum(dilations)


class ResNetBlock(nn.Module):
    """Temporal residual block ``(c_in/c_out)[d_c/d_p]``.

    Two conv-norm-PReLU layers of kernel ``d_c`` added to a skip path (1x1 projection when
    the widths differ), then average pooling with stride ``d_p`` (ceil mode).
    """

    def __init__(self, c_in: int, c_out: int, conv_kernel: int = 1, pool: int = 1):
        super().__init__()
        if conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        pad = conv_kernel // 2
        self.c_in = c_in
        self.branch = nn.Sequential(
            nn.Conv1d(c_in, c_out, conv_kernel, padding=pad, bias=False),
            GlobalLayerNorm(c_out),
            nn.PReLU(),
            nn.Conv1d(c_out, c_out, conv_kernel, padding=pad, bias=False),
            GlobalLayerNorm(c_out),
            nn.PReLU(),
        )
        self.skip = nn.Conv1d(c_in, c_out, 1, bias=False) if c_in != c_out else nn.Identity()
        self.pool = pool

    def forward(self, x):
        if x.shape[1] != self.c_in:
            raise ValueError(f"ResNet block expects {self.c_in} channels, got {x.shape[1]}")
        y = self.skip(x) + self.branch(x)
        if self.pool > 1:
            y = F.avg_pool1d(y, self.pool, self.pool, ceil_mode=True)
        return y


class BasicBlock2d(nn.Module):
    """Image residual block of the visual trunk (two 3x3 convs, layer-normalized)."""

    def __init__(self, c_in: int, c_out: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv2d(c_in, c_out, 3, stride, 1, bias=False)
        self.norm1 = layer_norm_2d(c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, 1, 1, bias=False)
        self.norm2 = layer_norm_2d(c_out)
        self.act1 = nn.PReLU(c_out)
        self.act2 = nn.PReLU(c_out)
        if stride != 1 or c_in != c_out:
            self.down = nn.Sequential(
                nn.Conv2d(c_in, c_out, 1, stride, bias=False), layer_norm_2d(c_out)
            )
        else:
            self.down = nn.Identity()

    def forward(self, x):
        y = self.act1(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act2(y + self.down(x))


class VisualFrontend(nn.Module):
    """Grayscale face track ``(batch, frames, H, W)`` -> per-frame features ``(batch, C, frames)``.

    A 3-D conv (temporal kernel 5, spatial stride 2) followed by an 18-layer residual image
    network applied to each frame and spatial global average pooling, then (optionally)
    :class:`TemporalNorm`.
    """

    def __init__(
        self,
        image_size: int = 112,
        stem_channels: int = 64,
        widths: Sequence[int] = (64, 128, 256, 256),
        blocks_per_stage: int = 2,
        temporal_norm: bool = True,
    ):
        super().__init__()
        self.image_size = image_size
        self.out_channels = widths[-1]
        self.stem = nn.Conv3d(
            1, stem_channels, (5, 7, 7), stride=(1, 2, 2), padding=(2, 3, 3), bias=False
        )
        self.stem_norm = layer_norm_2d(stem_channels)
        self.stem_act = nn.PReLU(stem_channels)
        layers = []
        c = stem_channels
        for i, w in enumerate(widths):
            for j in range(blocks_per_stage):
                stride = 2 if (i > 0 and j == 0) else 1
                layers.append(BasicBlock2d(c, w, stride))
                c = w
        self.trunk = nn.Sequential(*layers)
        self.out_norm = TemporalNorm(c) if temporal_norm else nn.Identity()

    def forward(self, v):
        if v.dim() != 4:
            raise ValueError(f"face track must be (batch, frames, H, W), got {tuple(v.shape)}")
        b, t, h, w = v.shape
        if (h, w) != (self.image_size, self.image_size):
            raise ValueError(
                f"expected {self.image_size}x{self.image_size} frames, got {h}x{w}"
            )
        x = self.stem(v.unsqueeze(1))  # (b, c, t, h', w')
        x = x.transpose(1, 2).reshape(b * t, x.shape[1], x.shape[3], x.shape[4])
        x = self.stem_act(self.stem_norm(x))
        x = F.max_pool2d(x, 3, 2, 1)
        x = self.trunk(x)
        x = x.mean(dim=(2, 3))
        return self.out_norm(x.reshape(b, t, -1).transpose(1, 2))


def align_frames(x: torch.Tensor, frames: int) -> torch.Tensor:
    """Truncate, or pad by repeating the last frame, to exactly ``frames`` frames."""
    n = x.shape[-1]
    if n == frames:
        return x
    if n > frames:
        return x[..., :frames]
    if n == 0:
        raise ValueError("cannot pad an empty feature sequence")
    pad = x[..., -1:].expand(*x.shape[:-1], frames - n)
    return torch.cat([x, pad], dim=-1)


def upsample_repeat(x: torch.Tensor, factor: int, frames: Optional[int] = None) -> torch.Tensor:
    """Repeat every frame ``factor`` times along the last axis; optionally align to ``frames``."""
    if factor < 1:
        raise ValueError(f"upsampling factor must be >= 1, got {factor}")
    y = x if factor == 1 else torch.repeat_interleave(x, factor, dim=-1)
    return y if frames is None else align_frames(y, frames)
