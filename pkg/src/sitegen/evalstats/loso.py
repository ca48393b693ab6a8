"""Leave-one-site-out harness with a subject-overlap audit."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError
from ..trainer import TrainConfig, evaluate, load_volumes, train, _crop_for
from ..volumes import DatasetManifest, Volume
from .aggregate import LosoReport, build_report
from .wilcoxon import wilcoxon_signed_rank

log = logging.getLogger(__name__)


@dataclass
class Fold:
    held_out_site: int
    train_subjects: list[str]
    test_subjects: list[str]


def make_folds(volumes: Sequence[Volume]) -> list[Fold]:
    sites = sorted({v.site_id for v in volumes})
    if len(sites) < 2:
        raise DataError("need-multiple-sites", f"leave-one-site-out needs >= 2 sites, got {sites}")
    return [
        Fold(
            site,
            sorted(v.subject_id for v in volumes if v.site_id != site),
            sorted(v.subject_id for v in volumes if v.site_id == site),
        )
        for site in sites
    ]


def audit_folds(folds: Sequence[Fold]) -> dict[int, int]:
    """Train/test subject overlap per fold; raises if any fold leaks."""
    overlap = {f.held_out_site: len(set(f.train_subjects) & set(f.test_subjects)) for f in folds}
    leaking = {s: n for s, n in overlap.items() if n}
    if leaking:
        raise AssertionError(f"subjects shared between train and test: {leaking}")
    return overlap


def run_loso(
    data: DatasetManifest | Sequence[Volume],
    config: TrainConfig,
    crop_shape: Sequence[int] | None = None,
    out_dir: str | Path | None = None,
    baseline: Sequence | None = None,
    volumes: Sequence[Volume] | None = None,
) -> LosoReport:
    """Train with each site held out in turn and score on that site.

    ``baseline`` may hold per-subject metrics of a reference run; matching
    subjects are then compared with the Wilcoxon signed-rank test.
    """
    crop = _crop_for(data, crop_shape)
    if volumes is None:
        volumes = load_volumes(data)
    folds = make_folds(volumes)
    subjects, fold_rows = [], []
    for fold in folds:
        log.info("fold: holding out site %d (%d test subjects)", fold.held_out_site, len(fold.test_subjects))
        checkpoint, curves = train(data, fold.held_out_site, config, crop, volumes=volumes)
        # the audit uses what the trainer actually consumed, not what we asked for
        fold.train_subjects = list(checkpoint.train_subjects)
        audit_folds([fold])
        metrics = evaluate(checkpoint, [v for v in volumes if v.site_id == fold.held_out_site], crop)
        subjects += metrics
        fold_rows.append(
            {
                "held_out_site": fold.held_out_site,
                "train_subjects": fold.train_subjects,
                "test_subjects": fold.test_subjects,
                "overlap": 0,
                "final_loss": curves.epochs[-1].total_loss,
                "final_site_accuracy": curves.epochs[-1].site_accuracy,
                "dice": float(np.mean([m.dice for m in metrics])),
            }
        )
        if out_dir is not None:
            fold_dir = Path(out_dir) / f"fold-site{fold.held_out_site}"
            fold_dir.mkdir(parents=True, exist_ok=True)
            checkpoint.save(fold_dir / "model.ckpt")
            curves.to_csv(fold_dir / "curves.csv")
            curves_dir = Path(out_dir) / "curves"
            curves_dir.mkdir(exist_ok=True)
            curves.to_csv(curves_dir / f"site{fold.held_out_site}.csv")

    report = build_report(subjects, config=config.to_dict(), folds=fold_rows)
    if baseline is not None:
        report.p_values = compare_runs(subjects, baseline)
    if out_dir is not None:
        report.write(out_dir)
    return report


def compare_runs(ours: Sequence, reference: Sequence) -> dict[str, float]:
    """Paired Wilcoxon p-values per metric over subjects present in both runs."""
    ref = {m.subject_id: m for m in reference}
    paired = [(m, ref[m.subject_id]) for m in ours if m.subject_id in ref]
    return {
        metric: wilcoxon_signed_rank([getattr(a, metric) for a, _ in paired], [getattr(b, metric) for _, b in paired])
        for metric in ("dice", "recall", "f1")
    }
