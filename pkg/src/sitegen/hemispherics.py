"""Left/right hemisphere split of axial slices and the inverse merge.

The right half is mirrored so both halves look like a left hemisphere to the
segmentation network.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import DataError
from .volumes import SliceSample


@dataclass
class HemiPair:
    left: SliceSample
    right: SliceSample
    origin: tuple[str, int]


def split_array(array: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split the last axis in half; the right half comes back column-reversed."""
    width = array.shape[-1]
    if width % 2:
        raise DataError("odd-width", f"cannot split width {width}")
    half = width // 2
    return array[..., :half], array[..., half:][..., ::-1]


def merge(left_pred: np.ndarray, right_pred: np.ndarray) -> np.ndarray:
    left_pred, right_pred = np.asarray(left_pred), np.asarray(right_pred)
    if left_pred.shape != right_pred.shape:
        raise DataError("shape-mismatch", f"{left_pred.shape} vs {right_pred.shape}")
    return np.concatenate([left_pred, right_pred[..., ::-1]], axis=-1)


def split(sample: SliceSample) -> HemiPair:
    if sample.side != "full":
        raise DataError("not-full-width", f"cannot split a {sample.side} hemisphere sample")
    halves = {attr: split_array(getattr(sample, attr)) for attr in ("image", "brain_mask", "lesion_mask")}
    left = replace(sample, side="left", **{k: np.ascontiguousarray(v[0]) for k, v in halves.items()})
    right = replace(sample, side="right", **{k: np.ascontiguousarray(v[1]) for k, v in halves.items()})
    return HemiPair(left, right, (sample.subject_id, sample.slice_index))


def merge_pair(pair: HemiPair) -> SliceSample:
    fields = {
        attr: merge(getattr(pair.left, attr), getattr(pair.right, attr))
        for attr in ("image", "brain_mask", "lesion_mask")
    }
    return replace(pair.left, side="full", **fields)


def split_all(samples: list[SliceSample]) -> list[SliceSample]:
    """Every full-width slice becomes two hemisphere samples, left first."""
    out = []
    for sample in samples:
        pair = split(sample)
        out.extend((pair.left, pair.right))
    return out
