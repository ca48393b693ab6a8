"""Soft Dice loss, site cross-entropy and their unweighted sum."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import SitegenError

DICE_EPSILON = 1e-5


@dataclass(frozen=True)
class LossConfig:
    epsilon: float = DICE_EPSILON
    reduction: str = "mean"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.reduction not in ("mean", "none"):
            raise ValueError(f"unknown reduction {self.reduction!r}")


def dice_loss(pred: torch.Tensor, target: torch.Tensor, epsilon: float = DICE_EPSILON, reduction: str = "mean"):
    """``1 - (2*sum(p*t) + eps) / (sum(p^2) + sum(t^2) + eps)`` per sample.

    A 2D input is one sample; for higher ranks the leading axis indexes samples
    and every other axis is summed.
    """
    pred = torch.as_tensor(pred)
    target = torch.as_tensor(target, dtype=pred.dtype)
    if pred.shape != target.shape:
        raise SitegenError("shape-mismatch", f"pred {tuple(pred.shape)} vs target {tuple(target.shape)}")
    if pred.dim() <= 2:
        pred, target = pred.unsqueeze(0), target.unsqueeze(0)
    dims = tuple(range(1, pred.dim()))
    overlap = (pred * target).sum(dim=dims)
    denom = (pred * pred).sum(dim=dims) + (target * target).sum(dim=dims)
    loss = 1.0 - (2.0 * overlap + epsilon) / (denom + epsilon)
    if reduction == "none":
        return loss
    return loss.mean()


def site_loss(logits: torch.Tensor, site_index, reduction: str = "mean"):
    """Cross-entropy ``-log softmax(logits)[site]``; 1D logits are one sample."""
    logits = torch.as_tensor(logits)
    single = logits.dim() == 1
    if single:
        logits = logits.unsqueeze(0)
    target = torch.as_tensor(site_index, dtype=torch.long, device=logits.device).reshape(-1)
    num_sites = logits.shape[-1]
    if target.numel() != logits.shape[0]:
        raise SitegenError("shape-mismatch", "one site index per logit row required")
    if (target < 0).any() or (target >= num_sites).any():
        raise SitegenError("index-out-of-range", f"site index {target.tolist()} outside [0, {num_sites})")
    return F.cross_entropy(logits, target, reduction=reduction)


def total_loss(dice, site):
    return dice + site
