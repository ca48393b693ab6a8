"""Metrics, statistics and reporting for leave-one-site-out evaluation.

Only the dependency-free pieces are imported here; :mod:`.loso`,
:mod:`.diagnostics` and :mod:`.efficiency` pull in the trainer and are
imported explicitly.
"""

from .aggregate import LosoReport, aggregate_metrics
from .metrics import SubjectMetrics, dice_score, lesion_f1, subject_metrics, voxel_recall
from .wilcoxon import wilcoxon_signed_rank

__all__ = [
    "LosoReport",
    "SubjectMetrics",
    "aggregate_metrics",
    "dice_score",
    "lesion_f1",
    "subject_metrics",
    "voxel_recall",
    "wilcoxon_signed_rank",
]
