"""Two-sided Wilcoxon signed-rank test for paired per-subject scores.

Zero differences are dropped. Small samples use the exact permutation
distribution of the positive rank sum (ties handled through midranks), larger
ones the tie-corrected normal approximation.
"""

from __future__ import annotations

import math

import numpy as np
from scipy import stats

from ..errors import SitegenError

EXACT_MAX_N = 25


def signed_ranks(a, b) -> tuple[np.ndarray, np.ndarray]:
    """Midranks of |a - b| and the sign of each nonzero difference."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise SitegenError("length-mismatch", f"paired samples of shapes {a.shape} and {b.shape}")
    diff = a - b
    diff = diff[diff != 0]
    return stats.rankdata(np.abs(diff)), np.sign(diff)


def exact_rank_sum_counts(ranks: np.ndarray) -> np.ndarray:
    """Number of sign assignments giving each value of 2 * T+.

    Midranks are multiples of 1/2, so doubling makes every rank an integer.
    """
    doubled = np.rint(2 * np.asarray(ranks)).astype(np.int64)
    counts = np.zeros(int(doubled.sum()) + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[: len(counts) - r]
        counts = counts + shifted
    return counts


def _exact_p(ranks, signs) -> float:
    counts = exact_rank_sum_counts(ranks)
    observed = int(np.rint(2 * ranks[signs > 0].sum()))
    total = counts.sum()
    lower = counts[: observed + 1].sum() / total
    upper = counts[observed:].sum() / total
    return min(1.0, 2.0 * min(lower, upper))


def _normal_p(ranks, signs, correction: bool) -> float:
    n = len(ranks)
    t_plus = ranks[signs > 0].sum()
    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    var = n * (n + 1) * (2 * n + 1) / 24.0 - (tie_sizes**3 - tie_sizes).sum() / 48.0
    if var <= 0:
        return 1.0
    d = t_plus - mean
    if correction:
        d = math.copysign(max(abs(d) - 0.5, 0.0), d)
    z = d / math.sqrt(var)
    return float(min(1.0, 2.0 * stats.norm.sf(abs(z))))


def wilcoxon_signed_rank(sample_a, sample_b, method: str = "auto", correction: bool = False) -> float:
    """Two-sided p-value for H0: the paired differences are symmetric about zero.

    ``method`` is ``"exact"``, ``"normal"`` or ``"auto"`` (exact for at most
    25 nonzero differences).
    """
    ranks, signs = signed_ranks(sample_a, sample_b)
    n = len(ranks)
    if n == 0:
        return 1.0
    if method == "auto":
        method = "exact" if n <= EXACT_MAX_N else "normal"
    if method == "exact":
        return _exact_p(ranks, signs)
    if method == "normal":
        return _normal_p(ranks, signs, correction)
    raise ValueError(f"unknown method {method!r}")
