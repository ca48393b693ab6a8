"""U-Net backbone with a width multiplier, plus analytic MACC/memory counting."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import SitegenError

BASE_WIDTHS = (64, 128, 256, 512, 1024)
BYTES_PER_VALUE = 4


def scaled_widths(width_multiplier: float) -> tuple[int, ...]:
    if not 0 < width_multiplier <= 1:
        raise ValueError(f"width multiplier must be in (0, 1], got {width_multiplier}")
    # scale the first stage and keep the doubling, so the channel-halving
    # up-convolutions always match their skip connections
    first = max(1, int(round(BASE_WIDTHS[0] * width_multiplier)))
    return tuple(first * 2**i for i in range(len(BASE_WIDTHS)))


class ConvBlock(nn.Sequential):
    """Two 3x3 conv + batch norm + ReLU layers."""

    def __init__(self, in_ch: int, out_ch: int):
        super().__init__(
            nn.Conv2d(in_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
            nn.Conv2d(out_ch, out_ch, 3, padding=1),
            nn.BatchNorm2d(out_ch),
            nn.ReLU(inplace=True),
        )


class UpBlock(nn.Module):
    """2x bilinear upsampling then a 1x1 conv with half the channels."""

    def __init__(self, in_ch: int):
        super().__init__()
        self.reduce = nn.Conv2d(in_ch, in_ch // 2, 1)

    def forward(self, x):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        return self.reduce(x)


class Encoder(nn.Module):
    def __init__(self, widths: Sequence[int], in_channels: int = 1):
        super().__init__()
        chans = (in_channels, *widths)
        self.blocks = nn.ModuleList(ConvBlock(chans[i], chans[i + 1]) for i in range(len(widths)))
        self.pool = nn.MaxPool2d(2)

    def forward(self, x, trace: dict | None = None):
        skips = []
        for i, block in enumerate(self.blocks):
            if i:
                x = self.pool(x)
                if trace is not None:
                    trace[f"pool{i}"] = tuple(x.shape[1:])
            x = block(x)
            if trace is not None:
                trace[f"conv{i + 1}"] = tuple(x.shape[1:])
            skips.append(x)
        return x, skips[:-1]


class Decoder(nn.Module):
    def __init__(self, widths: Sequence[int]):
        super().__init__()
        rev = tuple(reversed(widths))
        self.ups = nn.ModuleList(UpBlock(rev[i]) for i in range(len(rev) - 1))
        self.blocks = nn.ModuleList(ConvBlock(rev[i], rev[i + 1]) for i in range(len(rev) - 1))
        self.head = nn.Conv2d(rev[-1], 1, 1)

    def forward(self, x, skips, trace: dict | None = None):
        depth = len(skips) + 1
        for i, (up, block) in enumerate(zip(self.ups, self.blocks)):
            # encoder stage (depth - 1 - i) pairs with this decoder stage
            x = torch.cat([skips[-(i + 1)], up(x)], dim=1)
            if trace is not None:
                trace[f"up{i + 1}"] = tuple(x.shape[1:])
            x = block(x)
            if trace is not None:
                trace[f"conv{depth + 1 + i}"] = tuple(x.shape[1:])
        out = torch.sigmoid(self.head(x))
        if trace is not None:
            trace["output"] = tuple(out.shape[1:])
        return out


class UNet(nn.Module):
    def __init__(self, width_multiplier: float = 1.0, in_channels: int = 1):
        super().__init__()
        self.width_multiplier = width_multiplier
        self.widths = scaled_widths(width_multiplier)
        self.encoder = Encoder(self.widths, in_channels)
        self.decoder = Decoder(self.widths)

    @property
    def bottleneck_channels(self) -> int:
        return self.widths[-1]

    def check_input(self, x: torch.Tensor) -> None:
        factor = 2 ** (len(self.widths) - 1)
        if x.dim() != 4 or x.shape[-2] % factor or x.shape[-1] % factor:
            raise SitegenError(
                "shape-mismatch", f"input {tuple(x.shape)} must be (N, C, H, W) with H, W divisible by {factor}"
            )

    def forward(self, x: torch.Tensor, trace: dict | None = None):
        """Returns ``(probs, bottleneck)``; ``trace`` collects per-stage shapes."""
        self.check_input(x)
        if trace is not None:
            trace["input"] = tuple(x.shape[1:])
        bottleneck, skips = self.encoder(x, trace)
        return self.decoder(bottleneck, skips, trace), bottleneck


def predict_mask(probs, threshold: float = 0.5) -> np.ndarray:
    """Binary mask of pixels strictly above ``threshold``."""
    if isinstance(probs, torch.Tensor):
        probs = probs.detach().cpu().numpy()
    return (np.asarray(probs) > threshold).astype(np.uint8)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


@dataclass
class Cost:
    macc: int
    flops: int
    memory_bytes: int
    activation_bytes: int
    parameter_bytes: int
    parameters: int
    passes: int = 1

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def layer_maccs(widths: Sequence[int], input_shape: Sequence[int], in_channels: int = 1) -> list[tuple[str, int]]:
    """Analytic multiply-accumulates for every conv layer of the U-Net."""
    height, width = input_shape
    layers = []
    chans = (in_channels, *widths)
    sizes = []
    h, w = height, width
    for i in range(len(widths)):
        if i:
            h, w = h // 2, w // 2
        cin, cout = chans[i], chans[i + 1]
        layers.append((f"conv{i + 1}a", 9 * cin * cout * h * w))
        layers.append((f"conv{i + 1}b", 9 * cout * cout * h * w))
        sizes.append((h, w))
    rev = tuple(reversed(widths))
    depth = len(widths)
    for i in range(depth - 1):
        h, w = sizes[depth - 2 - i]
        layers.append((f"up{i + 1}", rev[i] * (rev[i] // 2) * h * w))
        layers.append((f"conv{depth + 1 + i}a", 9 * rev[i] * rev[i + 1] * h * w))
        layers.append((f"conv{depth + 1 + i}b", 9 * rev[i + 1] * rev[i + 1] * h * w))
    layers.append(("output", rev[-1] * 1 * height * width))
    return layers


def _activation_values(widths: Sequence[int], input_shape: Sequence[int]) -> int:
    """Feature-map values held by one forward pass (every conv/BN/ReLU/pool/up output)."""
    height, width = input_shape
    total = height * width
    rev = tuple(reversed(widths))
    depth = len(widths)
    for i, c in enumerate(widths):
        area = (height >> i) * (width >> i)
        if i:
            total += widths[i - 1] * area  # pooled input
        total += 6 * c * area  # two conv, two BN, two ReLU outputs
    for i in range(depth - 1):
        area = (height >> (depth - 2 - i)) * (width >> (depth - 2 - i))
        total += rev[i] * area  # upsampled
        total += (rev[i] // 2) * area  # 1x1 reduction
        total += rev[i] * area  # concatenation
        total += 6 * rev[i + 1] * area
    total += 2 * height * width  # logits + sigmoid
    return total


def count_macc(params: UNet | float, input_shape: Sequence[int], passes: int = 1) -> Cost:
    """Analytic cost of ``passes`` U-Net forward passes on ``input_shape`` (H, W).

    ``macc`` is per pass. ``flops`` follows 2 * MACC per pass summed over all
    passes, so two hemisphere passes cost the same FLOPs as one full-width pass.
    """
    if isinstance(params, UNet):
        widths, n_params = params.widths, count_parameters(params)
    else:
        model = UNet(float(params))
        widths, n_params = model.widths, count_parameters(model)
    factor = 2 ** (len(widths) - 1)
    if input_shape[0] % factor or input_shape[1] % factor:
        raise SitegenError("shape-mismatch", f"{tuple(input_shape)} not divisible by {factor}")
    macc = sum(m for _, m in layer_maccs(widths, input_shape))
    activation_bytes = _activation_values(widths, input_shape) * BYTES_PER_VALUE
    parameter_bytes = n_params * BYTES_PER_VALUE
    return Cost(
        macc=macc,
        flops=2 * macc * passes,
        memory_bytes=activation_bytes + parameter_bytes,
        activation_bytes=activation_bytes,
        parameter_bytes=parameter_bytes,
        parameters=n_params,
        passes=passes,
    )
