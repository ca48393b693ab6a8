"""Aggregation of per-subject metrics into a leave-one-site-out report.

Per-site rows carry mean and std across that site's subjects; the overall row
carries mean and std across the per-site means. Both use the population std.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .metrics import SubjectMetrics

METRICS = ("dice", "recall", "f1")


@dataclass
class Summary:
    mean: float
    std: float
    n: int


@dataclass
class LosoReport:
    per_site: dict[int, dict[str, Summary]]
    overall: dict[str, Summary]
    subjects: list[SubjectMetrics] = field(default_factory=list)
    p_values: dict[str, float] = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    efficiency: dict = field(default_factory=dict)
    folds: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_site": {str(s): {m: asdict(v) for m, v in row.items()} for s, row in self.per_site.items()},
            "overall": {m: asdict(v) for m, v in self.overall.items()},
            "subjects": [s.as_dict() for s in self.subjects],
            "p_values": self.p_values,
            "config": self.config,
            "efficiency": self.efficiency,
            "folds": self.folds,
        }

    def write(self, out_dir: str | Path) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(self.to_dict(), indent=2))
        write_subject_csv(self.subjects, out_dir / "metrics.csv")
        return out_dir


def _summary(values: Iterable[float]) -> Summary:
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return Summary(float("nan"), float("nan"), 0)
    return Summary(float(values.mean()), float(values.std()), int(values.size))


def aggregate_metrics(subjects: list[SubjectMetrics]) -> tuple[dict[int, dict[str, Summary]], dict[str, Summary]]:
    sites = sorted({s.site_id for s in subjects})
    per_site = {
        site: {m: _summary(getattr(s, m) for s in subjects if s.site_id == site) for m in METRICS}
        for site in sites
    }
    overall = {m: _summary(per_site[site][m].mean for site in sites) for m in METRICS}
    return per_site, overall


def build_report(subjects: list[SubjectMetrics], **extra) -> LosoReport:
    per_site, overall = aggregate_metrics(subjects)
    return LosoReport(per_site=per_site, overall=overall, subjects=list(subjects), **extra)


def write_subject_csv(subjects: list[SubjectMetrics], path: str | Path) -> Path:
    path = Path(path)
    fields = ["subject_id", "site_id", "dice", "recall", "f1", "lesion_voxels"]
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for s in subjects:
            writer.writerow({k: getattr(s, k) for k in fields})
    return path
