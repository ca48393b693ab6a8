"""The assembled network: optional MAIN, U-Net, optional site classifier."""

from __future__ import annotations

from typing import Sequence

import torch
from torch import nn

from .backbone import UNet
from .main_normalizer import MainNormalizer
from .site_adversary import SiteClassifier, grl

GROUPS = ("main", "encoder", "decoder", "site")


class SiteGeneralizingSegmenter(nn.Module):
    def __init__(
        self,
        crop_shape: Sequence[int],
        num_sites: int = 0,
        width_multiplier: float = 1.0,
        use_main: bool = True,
        use_augmentation: bool = True,
        use_site_adversary: bool = True,
        grl_constant: float = 1.0,
    ):
        super().__init__()
        self.crop_shape = tuple(crop_shape)
        self.use_augmentation = use_augmentation
        self.grl_constant = grl_constant
        self.main = MainNormalizer(self.crop_shape) if use_main else None
        self.unet = UNet(width_multiplier)
        self.site = (
            SiteClassifier(self.unet.bottleneck_channels, num_sites) if use_site_adversary else None
        )

    def parameter_groups(self) -> dict[str, list[nn.Parameter]]:
        return {
            "main": list(self.main.parameters()) if self.main is not None else [],
            "encoder": list(self.unet.encoder.parameters()),
            "decoder": list(self.unet.decoder.parameters()),
            "site": list(self.site.parameters()) if self.site is not None else [],
        }

    @staticmethod
    def group_of(name: str) -> str:
        if name.startswith("main."):
            return "main"
        if name.startswith("unet.encoder."):
            return "encoder"
        if name.startswith("unet.decoder."):
            return "decoder"
        if name.startswith("site."):
            return "site"
        raise KeyError(name)

    def normalize(self, zscored: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        if self.main is None:
            return zscored * mask
        out, _, _ = self.main(zscored, mask)
        return out

    def hemispheres(self, full: torch.Tensor) -> torch.Tensor:
        """``(N, C, H, W)`` -> ``(N, 2, C, H, W/2)`` with the right half mirrored."""
        half = full.shape[-1] // 2
        return torch.stack([full[..., :half], full[..., half:].flip(-1)], dim=1)

    def site_logits(self, bottleneck: torch.Tensor) -> torch.Tensor:
        return self.site(grl(bottleneck, self.grl_constant))

    def forward_training(self, zscored, mask, pick: torch.Tensor | None = None):
        """Training forward over parent slices.

        ``pick`` is an ``(M, 2)`` long tensor of (parent row, side) hemisphere
        items when augmentation is on; otherwise every parent is used whole.
        Returns ``(probs, bottleneck, inputs)``.
        """
        x = self.normalize(zscored, mask)
        if self.use_augmentation:
            halves = self.hemispheres(x)
            x = halves[pick[:, 0], pick[:, 1]]
        probs, bottleneck = self.unet(x)
        return probs, bottleneck, x

    @torch.no_grad()
    def segment(self, zscored: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        """Full-width lesion probabilities for a batch of z-scored slices."""
        x = self.normalize(zscored, mask)
        if not self.use_augmentation:
            return self.unet(x)[0]
        n = x.shape[0]
        halves = self.hemispheres(x).flatten(0, 1)
        probs = self.unet(halves)[0].reshape(n, 2, *halves.shape[1:])
        return torch.cat([probs[:, 0], probs[:, 1].flip(-1)], dim=-1)
