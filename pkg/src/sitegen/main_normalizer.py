"""Masked adaptive instance normalization (MAIN).

Two identical light branches look at the masked z-scored slice and each emit
one scalar, giving a per-image affine ``(gamma * x + beta) * mask``.
"""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .errors import SitegenError

FC_OUT = 256


def _conv_block(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1, bias=False),
        nn.BatchNorm2d(out_ch, momentum=0.1),
        nn.ReLU(inplace=True),
    )


class AffineHead(nn.Module):
    """conv-pool-conv-pool, FC to 256 features, mean of those features."""

    def __init__(self, input_shape: Sequence[int], init_value: float = 0.0):
        super().__init__()
        height, width = input_shape
        if height % 4 or width % 4:
            raise SitegenError("shape-mismatch", f"MAIN input {tuple(input_shape)} must be divisible by 4")
        self.input_shape = (height, width)
        self.features = nn.Sequential(
            _conv_block(1, 1),
            nn.MaxPool2d(2),
            _conv_block(1, 1),
            nn.MaxPool2d(2),
        )
        self.fc = nn.Linear((height // 4) * (width // 4), FC_OUT)
        with torch.no_grad():
            self.fc.bias.fill_(init_value)

    @property
    def fc_in_features(self) -> int:
        return self.fc.in_features

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.features(x).flatten(1)
        # reshaping the 256 features to 16x16 and average pooling is a plain mean
        return self.fc(h).mean(dim=1)


class MainNormalizer(nn.Module):
    def __init__(self, input_shape: Sequence[int] = (224, 192), identity_init: bool = True):
        super().__init__()
        self.input_shape = tuple(input_shape)
        self.gamma_head = AffineHead(input_shape, 1.0 if identity_init else 0.0)
        self.beta_head = AffineHead(input_shape, 0.0)

    def predict_affine(self, masked: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        masked = _as_batch(masked)
        if tuple(masked.shape[-2:]) != self.input_shape:
            raise SitegenError(
                "shape-mismatch", f"MAIN built for {self.input_shape}, got {tuple(masked.shape[-2:])}"
            )
        return self.gamma_head(masked), self.beta_head(masked)

    def forward(self, zscored: torch.Tensor, mask: torch.Tensor):
        """Returns ``(normalized, gamma, beta)`` for a batch ``(N, 1, H, W)``."""
        zscored, mask = _as_batch(zscored), _as_batch(mask)
        gamma, beta = self.predict_affine(zscored * mask)
        return apply_main(zscored, mask, gamma, beta), gamma, beta


def _as_batch(x: torch.Tensor) -> torch.Tensor:
    x = torch.as_tensor(x)
    if x.dim() == 2:
        return x[None, None]
    if x.dim() == 3:
        return x[:, None]
    return x


def apply_main(image, mask, gamma, beta):
    """``(gamma * image + beta) * mask``; works on numpy arrays or tensors.

    ``gamma``/``beta`` may be scalars or one value per leading batch entry.
    """
    if isinstance(gamma, torch.Tensor) and gamma.dim() == 1:
        shape = (-1,) + (1,) * (image.dim() - 1)
        gamma, beta = gamma.reshape(shape), beta.reshape(shape)
    return (gamma * image + beta) * mask


def predict_affine(masked_slice, params: MainNormalizer) -> tuple[float, float]:
    """Per-image (gamma, beta) for a single 2D masked slice."""
    with torch.no_grad():
        x = torch.as_tensor(masked_slice, dtype=next(params.parameters()).dtype)
        if x.dim() != 2:
            raise SitegenError("shape-mismatch", "expected one 2D slice")
        gamma, beta = params.predict_affine(x)
    return float(gamma[0]), float(beta[0])


def normalize_batch(samples, params: MainNormalizer) -> list:
    """MAIN output for each z-scored :class:`SliceSample`, one affine per image."""
    dtype = next(params.parameters()).dtype
    images = torch.stack([torch.as_tensor(s.image, dtype=dtype) for s in samples])[:, None]
    masks = torch.stack([torch.as_tensor(s.brain_mask, dtype=dtype) for s in samples])[:, None]
    with torch.no_grad():
        out, _, _ = params(images, masks)
    return [o[0].numpy() for o in out]
