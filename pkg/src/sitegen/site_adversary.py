"""Gradient reversal layer and the site classifier fed by the U-Net bottleneck."""

from __future__ import annotations

import torch
from torch import nn

from .backbone import scaled_widths
from .errors import SitegenError

GRL_CONSTANT = 1.0


class GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, constant):
        ctx.constant = constant
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.constant, None


def grl(x: torch.Tensor, constant: float = GRL_CONSTANT) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-constant``."""
    return GradientReversal.apply(x, constant)


class GradReverse(nn.Module):
    def __init__(self, constant: float = GRL_CONSTANT):
        super().__init__()
        self.constant = constant

    def forward(self, x):
        return grl(x, self.constant)


class SiteClassifier(nn.Module):
    """Two 3x3 conv blocks, max pool, global average pool, linear to K sites."""

    def __init__(self, in_channels: int, num_sites: int, hidden: int | None = None):
        super().__init__()
        if num_sites < 1:
            raise ValueError("num_sites must be >= 1")
        hidden = hidden or in_channels
        self.in_channels = in_channels
        self.num_sites = num_sites
        self.features = nn.Sequential(
            nn.Conv2d(in_channels, hidden, 3, padding=1),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            nn.Conv2d(hidden, hidden, 3, padding=1),
            nn.BatchNorm2d(hidden),
            nn.ReLU(inplace=True),
            nn.MaxPool2d(2, ceil_mode=True),  # tolerates a 1-pixel-wide bottleneck
            nn.AdaptiveAvgPool2d(1),
        )
        self.fc = nn.Linear(hidden, num_sites)

    @classmethod
    def for_width(cls, width_multiplier: float, num_sites: int) -> "SiteClassifier":
        channels = scaled_widths(width_multiplier)[-1]
        return cls(channels, num_sites)

    def forward(self, bottleneck: torch.Tensor) -> torch.Tensor:
        if bottleneck.dim() != 4 or bottleneck.shape[1] != self.in_channels:
            raise SitegenError(
                "shape-mismatch",
                f"classifier expects (N, {self.in_channels}, h, w), got {tuple(bottleneck.shape)}",
            )
        return self.fc(self.features(bottleneck).flatten(1))


def classify_site(bottleneck: torch.Tensor, params: SiteClassifier, reverse: bool = True) -> torch.Tensor:
    """Site logits, with the gradient reversal layer in front by default."""
    return params(grl(bottleneck) if reverse else bottleneck)
