"""Shared neural building blocks for the time-domain network."""

from __future__ import annotations

import torch
import torch.nn as nn

_NORM_EPS = 1e-8


class GlobalLayerNorm(nn.Module):
    """Layer normalization over channel and time dimensions jointly."""

    def __init__(self, channels: int):
        super().__init__()
        self.gamma = nn.Parameter(torch.ones(1, channels, 1))
        self.beta = nn.Parameter(torch.zeros(1, channels, 1))

    def forward(self, x):
        # x: [M, C, T]; statistics pooled over (C, T) per sample
        mean = x.mean(dim=(1, 2), keepdim=True)
        var = ((x - mean) ** 2).mean(dim=(1, 2), keepdim=True)
        return self.gamma * (x - mean) / torch.sqrt(var + _NORM_EPS) + self.beta


class ConvBlock(nn.Module):
    """Dilated depthwise-separable convolution block with a residual path.

    [M, C, T] -> 1x1 conv to hidden -> PReLU -> gLN -> depthwise conv
    (dilated, same padding) -> PReLU -> gLN -> 1x1 conv back -> + input.
    """

    def __init__(self, channels: int, hidden: int, kernel: int, dilation: int):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("kernel size must be odd for same padding")
        padding = (kernel - 1) * dilation // 2
        self.expand = nn.Conv1d(channels, hidden, 1, bias=False)
        self.act1 = nn.PReLU()
        self.norm1 = GlobalLayerNorm(hidden)
        self.depthwise = nn.Conv1d(
            hidden, hidden, kernel,
            padding=padding, dilation=dilation, groups=hidden, bias=False,
        )
        self.act2 = nn.PReLU()
        self.norm2 = GlobalLayerNorm(hidden)
        self.project = nn.Conv1d(hidden, channels, 1, bias=False)

    def forward(self, x):
        y = self.norm1(self.act1(self.expand(x)))
        y = self.norm2(self.act2(self.depthwise(y)))
        return x + self.project(y)
