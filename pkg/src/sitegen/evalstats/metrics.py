"""Per-subject Dice, voxel recall and lesion-wise F1."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from ..errors import SitegenError

# 26-connectivity in 3D (8 in 2D)
def _structure(ndim: int) -> np.ndarray:
    return np.ones((3,) * ndim, dtype=bool)


@dataclass
class SubjectMetrics:
    dice: float
    recall: float
    f1: float
    subject_id: str = ""
    site_id: int = -1
    lesion_voxels: int = 0

    def as_dict(self) -> dict:
        return asdict(self)


def _check(pred, truth):
    pred, truth = np.asarray(pred) != 0, np.asarray(truth) != 0
    if pred.shape != truth.shape:
        raise SitegenError("shape-mismatch", f"prediction {pred.shape} vs truth {truth.shape}")
    return pred, truth


def dice_score(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    total = pred.sum() + truth.sum()
    if total == 0:
        return 1.0
    return float(2.0 * np.logical_and(pred, truth).sum() / total)


def voxel_recall(pred, truth) -> float:
    pred, truth = _check(pred, truth)
    positives = truth.sum()
    if positives == 0:
        return 1.0 if pred.sum() == 0 else 0.0
    return float(np.logical_and(pred, truth).sum() / positives)


def lesion_counts(pred, truth) -> tuple[int, int, int, int]:
    """(detected truth lesions, truth lesions, matched predicted lesions, predicted lesions)."""
    pred, truth = _check(pred, truth)
    structure = _structure(pred.ndim)
    truth_labels, n_truth = ndimage.label(truth, structure=structure)
    pred_labels, n_pred = ndimage.label(pred, structure=structure)
    detected = len(np.setdiff1d(np.unique(truth_labels[pred]), [0]))
    matched = len(np.setdiff1d(np.unique(pred_labels[truth]), [0]))
    return detected, n_truth, matched, n_pred


def lesion_f1(pred, truth, voxelwise: bool = False) -> float:
    """Lesion-instance F1; a component counts as found if it overlaps by >= 1 voxel."""
    if voxelwise:
        return dice_score(pred, truth)
    detected, n_truth, matched, n_pred = lesion_counts(pred, truth)
    if n_truth == 0 and n_pred == 0:
        return 1.0
    if n_truth == 0 or n_pred == 0:
        return 0.0
    recall, precision = detected / n_truth, matched / n_pred
    if recall + precision == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def subject_metrics(pred_volume, truth_volume, subject_id: str = "", site_id: int = -1, voxelwise_f1: bool = False) -> SubjectMetrics:
    pred, truth = _check(pred_volume, truth_volume)
    return SubjectMetrics(
        dice=dice_score(pred, truth),
        recall=voxel_recall(pred, truth),
        f1=lesion_f1(pred, truth, voxelwise=voxelwise_f1),
        subject_id=subject_id,
        site_id=int(site_id),
        lesion_voxels=int(truth.sum()),
    )


def slicewise_dice(pred_volume, truth_volume) -> float:
    """Mean 2D Dice over slices that hold any lesion or prediction."""
    pred, truth = _check(pred_volume, truth_volume)
    scores = [dice_score(p, t) for p, t in zip(pred, truth) if p.any() or t.any()]
    return float(np.mean(scores)) if scores else 1.0
