"""Intensity-distribution and lesion-size diagnostics.

Per-site in-brain intensity samples are compared pairwise with the two-sample
KS statistic, before MAIN (z-score only) and after it. KS is computed on the
raw samples; the 64-bin histograms are only for plotting and CSV export.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import stats

from ..trainer import Checkpoint, prepare_slices
from ..volumes import Volume

HIST_BINS = 64


@dataclass
class HistogramDiagnostics:
    sites: list[int]
    edges: np.ndarray
    histograms: dict[str, dict[int, np.ndarray]]  # stage -> site -> density
    ks: dict[str, np.ndarray]  # stage -> (K, K) KS statistics
    samples: dict[str, dict[int, np.ndarray]] = field(repr=False, default_factory=dict)

    def mean_pairwise_ks(self, stage: str) -> float:
        k = len(self.sites)
        upper = [self.ks[stage][i, j] for i, j in itertools.combinations(range(k), 2)]
        return float(np.mean(upper)) if upper else 0.0

    def to_dict(self) -> dict:
        return {
            "sites": self.sites,
            "edges": self.edges.tolist(),
            "histograms": {st: {str(s): h.tolist() for s, h in hs.items()} for st, hs in self.histograms.items()},
            "ks": {st: m.tolist() for st, m in self.ks.items()},
            "mean_pairwise_ks": {st: self.mean_pairwise_ks(st) for st in self.ks},
        }

    def write(self, out_dir: str | Path) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        written = []
        path = out_dir / "histograms.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "site", "bin_left", "bin_right", "density"])
            for stage, hists in self.histograms.items():
                for site, hist in hists.items():
                    for b, value in enumerate(hist):
                        writer.writerow([stage, site, self.edges[b], self.edges[b + 1], value])
        written.append(path)
        path = out_dir / "ks.csv"
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["stage", "site_a", "site_b", "ks"])
            for stage, matrix in self.ks.items():
                for i, j in itertools.combinations(range(len(self.sites)), 2):
                    writer.writerow([stage, self.sites[i], self.sites[j], matrix[i, j]])
        written.append(path)
        written.append(self.plot(out_dir / "plots" / "histograms.png"))
        return written

    def plot(self, path: str | Path) -> Path:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        stages = list(self.histograms)
        fig, axes = plt.subplots(1, len(stages), figsize=(5 * len(stages), 3.5), squeeze=False)
        centers = 0.5 * (self.edges[1:] + self.edges[:-1])
        for ax, stage in zip(axes[0], stages):
            for site, hist in self.histograms[stage].items():
                ax.plot(centers, hist, label=f"site {site}")
            ax.set_title(f"{stage} (mean KS {self.mean_pairwise_ks(stage):.3f})")
            ax.set_xlabel("intensity")
        axes[0][0].set_ylabel("density")
        axes[0][0].legend()
        fig.tight_layout()
        fig.savefig(path, dpi=100)
        plt.close(fig)
        return path


def ks_matrix(samples: dict[int, np.ndarray]) -> np.ndarray:
    sites = sorted(samples)
    out = np.zeros((len(sites), len(sites)))
    for i, j in itertools.combinations(range(len(sites)), 2):
        out[i, j] = out[j, i] = stats.ks_2samp(samples[sites[i]], samples[sites[j]]).statistic
    return out


def site_samples(volumes: Sequence[Volume], crop: Sequence[int], checkpoint: Checkpoint | None = None, batch_size: int = 64) -> dict[str, dict[int, np.ndarray]]:
    """In-brain intensities per site after z-scoring and, if available, after MAIN."""
    slices = prepare_slices(volumes, crop)
    inside = slices.brain > 0
    out = {"zscore": {}}
    for site in sorted(set(slices.site.tolist())):
        rows = slices.site == site
        out["zscore"][site] = slices.images[rows][inside[rows]].astype(np.float64)
    if checkpoint is None:
        return out
    model = checkpoint.build_model().eval()
    if model.main is None:
        return out
    normalized = np.empty_like(slices.images)
    with torch.no_grad():
        for start in range(0, len(slices), batch_size):
            sl = slice(start, start + batch_size)
            zs = torch.from_numpy(slices.images[sl])[:, None]
            brain = torch.from_numpy(slices.brain[sl])[:, None]
            normalized[sl] = model.normalize(zs, brain)[:, 0].numpy()
    out["main"] = {}
    for site in out["zscore"]:
        rows = slices.site == site
        out["main"][site] = normalized[rows][inside[rows]].astype(np.float64)
    return out


def histogram_diagnostics(
    volumes: Sequence[Volume],
    checkpoint: Checkpoint | None = None,
    crop: Sequence[int] | None = None,
    bins: int = HIST_BINS,
) -> HistogramDiagnostics:
    if crop is None:
        if checkpoint is None:
            raise ValueError("crop is required without a checkpoint")
        crop = checkpoint.crop_shape
    samples = site_samples(volumes, crop, checkpoint)
    everything = np.concatenate([s for stage in samples.values() for s in stage.values()])
    # one shared range for every stage and site so the curves are comparable
    lo, hi = np.percentile(everything, [0.5, 99.5])
    if hi <= lo:
        hi = lo + 1.0
    edges = np.linspace(lo, hi, bins + 1)
    histograms = {
        stage: {site: np.histogram(np.clip(v, lo, hi), bins=edges, density=True)[0] for site, v in per.items()}
        for stage, per in samples.items()
    }
    return HistogramDiagnostics(
        sites=sorted(samples["zscore"]),
        edges=edges,
        histograms=histograms,
        ks={stage: ks_matrix(per) for stage, per in samples.items()},
        samples=samples,
    )


LESION_SIZE_EDGES = (0, 500, 1000, 2000, 5000, 10000, np.inf)


def lesion_size_table(subjects: Sequence, edges: Sequence[float] = LESION_SIZE_EDGES) -> list[dict]:
    """Mean Dice per lesion-volume bin (voxels)."""
    rows = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        dice = [s.dice for s in subjects if lo <= s.lesion_voxels < hi]
        rows.append(
            {
                "min_voxels": lo,
                "max_voxels": hi,
                "subjects": len(dice),
                "mean_dice": float(np.mean(dice)) if dice else float("nan"),
            }
        )
    return rows


def write_lesion_size(subjects: Sequence, out_dir: str | Path) -> list[Path]:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = lesion_size_table(subjects)
    csv_path = out_dir / "lesion_size.csv"
    with csv_path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    png = out_dir / "plots" / "lesion_size.png"
    png.parent.mkdir(parents=True, exist_ok=True)
    fig, (left, right) = plt.subplots(1, 2, figsize=(9, 3.5))
    left.hist([s.lesion_voxels for s in subjects], bins=20)
    left.set_xlabel("lesion voxels")
    left.set_ylabel("subjects")
    right.scatter([s.lesion_voxels for s in subjects], [s.dice for s in subjects], s=12)
    right.set_xlabel("lesion voxels")
    right.set_ylabel("Dice")
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)
    return [csv_path, png]
