"""Full-width versus hemisphere compute table."""

from __future__ import annotations

import csv
from fractions import Fraction
from pathlib import Path
from typing import Sequence

from ..backbone import count_macc

FULL_SLICE = (224, 192)


def efficiency_report(width_multiplier: float = 1.0, slice_shape: Sequence[int] = FULL_SLICE) -> dict:
    """Cost of segmenting one slice whole versus as two mirrored hemispheres.

    MACC is per forward pass; FLOPs cover every pass needed for the slice.
    """
    h, w = slice_shape
    if w % 2:
        raise ValueError(f"slice width must be even, got {w}")
    full = count_macc(width_multiplier, (h, w), passes=1)
    half = count_macc(width_multiplier, (h, w // 2), passes=2)
    ratio = Fraction(half.macc, full.macc)
    return {
        "width_multiplier": width_multiplier,
        "slice_shape": [h, w],
        "rows": [
            {"input": f"{h}x{w}", **full.as_dict()},
            {"input": f"{h}x{w // 2}", **half.as_dict()},
        ],
        "macc_ratio": float(ratio),
        "macc_ratio_exact": f"{ratio.numerator}/{ratio.denominator}",
        "flops_equal": half.flops == full.flops,
    }


def write_efficiency(report: dict, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = report["rows"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    return path
