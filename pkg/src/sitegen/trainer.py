"""Joint training of MAIN, U-Net and site classifier; checkpoints; evaluation.

One SGD step per batch on ``dice + site`` loss. Because the site classifier
sits behind the gradient reversal layer, that single backward pass gives MAIN
and the encoder ``dL_d - dL_s``, the decoder ``dL_d`` only and the classifier
``dL_s`` only.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import DataError, SitegenError, TrainingError
from .evalstats.metrics import SubjectMetrics, subject_metrics
from .losses import DICE_EPSILON, dice_loss, site_loss
from .model import SiteGeneralizingSegmenter
from .volumes import DatasetManifest, Volume, _masked_moments, crop_slice

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SGCKPT01"


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    lr_decay_per_epoch: float = 0.96
    # "lr": multiply the learning rate by lr_decay_per_epoch after each epoch;
    # "l2": constant learning rate with L2 penalty l2_coefficient
    decay_mode: str = "lr"
    l2_coefficient: float = 0.04
    momentum: float = 0.0
    # "sgd" as published; "adam" for desk-scale runs
    optimizer: str = "sgd"
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0
    width_multiplier: float = 1.0
    use_main: bool = True
    use_augmentation: bool = True
    use_site_adversary: bool = True
    grl_constant: float = 1.0
    balanced_sampling: bool = False
    dice_epsilon: float = DICE_EPSILON
    eval_batch_size: int = 32

    def __post_init__(self):
        if self.learning_rate <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("learning_rate, epochs and batch_size must be positive")
        if not 0 < self.width_multiplier <= 1:
            raise ValueError("width_multiplier must be in (0, 1]")
        if self.decay_mode not in ("lr", "l2"):
            raise ValueError(f"unknown decay_mode {self.decay_mode!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate in effect after ``epoch`` completed epochs."""
        if self.decay_mode == "l2":
            return self.learning_rate
        return self.learning_rate * self.lr_decay_per_epoch**epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**values)

    def with_flags(self, use_augmentation: bool, use_site_adversary: bool, use_main: bool) -> "TrainConfig":
        values = self.to_dict()
        values.update(use_augmentation=use_augmentation, use_site_adversary=use_site_adversary, use_main=use_main)
        return TrainConfig(**values)


# --------------------------------------------------------------------------
# data


@dataclass
class SliceSet:
    """Z-scored, cropped slices stacked into arrays."""

    images: np.ndarray  # (N, H, W) float32
    brain: np.ndarray
    lesion: np.ndarray
    site: np.ndarray  # raw site ids
    subject: list[str]
    slice_index: np.ndarray

    def __len__(self):
        return len(self.images)


def prepare_slices(volumes: Iterable[Volume], crop: Sequence[int]) -> SliceSet:
    """Crop every axial slice and z-score it inside its brain mask.

    Slices with no brain or constant in-brain intensity are dropped.
    """
    images, brains, lesions, sites, subjects, indices = [], [], [], [], [], []
    for vol in volumes:
        image = crop_slice(vol.intensities, crop)
        brain = crop_slice(vol.brain_mask, crop)
        lesion = crop_slice(vol.lesion_mask, crop)
        for d in range(image.shape[0]):
            if not brain[d].any():
                continue
            try:
                mu, sigma = _masked_moments(image[d], brain[d])
            except DataError:
                continue
            z = ((image[d].astype(np.float64) - mu) / sigma) * (brain[d] != 0)
            images.append(z.astype(np.float32))
            brains.append(brain[d].astype(np.float32))
            lesions.append(lesion[d].astype(np.float32))
            sites.append(vol.site_id)
            subjects.append(vol.subject_id)
            indices.append(d)
    h, w = crop
    empty = np.zeros((0, h, w), np.float32)
    return SliceSet(
        images=np.stack(images) if images else empty,
        brain=np.stack(brains) if brains else empty,
        lesion=np.stack(lesions) if lesions else empty,
        site=np.asarray(sites, dtype=np.int64),
        subject=subjects,
        slice_index=np.asarray(indices, dtype=np.int64),
    )


def load_volumes(data: DatasetManifest | Sequence[Volume], sites: Iterable[int] | None = None) -> list[Volume]:
    keep = None if sites is None else set(sites)
    if isinstance(data, DatasetManifest):
        return [data.load(e) for e in data.subjects if keep is None or e.site_id in keep]
    return [v for v in data if keep is None or v.site_id in keep]


def _crop_for(data, crop_shape):
    if crop_shape is not None:
        return tuple(crop_shape)
    if isinstance(data, DatasetManifest):
        return tuple(data.crop_shape)
    raise DataError("missing-crop", "crop_shape is required for in-memory volumes")


# --------------------------------------------------------------------------
# checkpoint


@dataclass
class EpochStats:
    epoch: int
    total_loss: float
    site_accuracy: float
    dice_loss: float
    site_loss: float
    lr: float
    seconds: float


@dataclass
class TrainingCurves:
    epochs: list[EpochStats] = field(default_factory=list)

    def column(self, name: str) -> list[float]:
        return [getattr(e, name) for e in self.epochs]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        names = ["epoch", "total_loss", "site_accuracy", "dice_loss", "site_loss", "lr", "seconds"]
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(names)
        for e in self.epochs:
            writer.writerow([getattr(e, n) for n in names])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class Checkpoint:
    state: dict[str, torch.Tensor]
    site_index: dict[int, int]
    config: TrainConfig
    crop_shape: tuple[int, int]
    epoch: int
    rng_state: dict = field(default_factory=dict)
    held_out_site: int | None = None
    train_subjects: list[str] = field(default_factory=list)

    @property
    def num_sites(self) -> int:
        return len(self.site_index)

    def build_model(self) -> SiteGeneralizingSegmenter:
        model = make_model(self.config, self.crop_shape, max(self.num_sites, 1))
        model.load_state_dict(self.state)
        model.eval()
        return model

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        entries, chunks, offset = [], [], 0
        tensors = dict(self.state)
        if "torch" in self.rng_state:
            tensors["rng.torch"] = self.rng_state["torch"]
        for name, tensor in tensors.items():
            array = tensor.detach().cpu().contiguous().numpy()
            array = array.astype(array.dtype.newbyteorder("<"), copy=False)
            data = array.tobytes()
            group = "rng" if name.startswith("rng.") else SiteGeneralizingSegmenter.group_of(name)
            entries.append(
                {
                    "name": name,
                    "group": group,
                    "shape": list(array.shape),
                    "dtype": array.dtype.str,
                    "offset": offset,
                    "nbytes": len(data),
                }
            )
            chunks.append(data)
            offset += len(data)
        header = {
            "format": "sitegen-checkpoint",
            "version": 1,
            "config": self.config.to_dict(),
            "site_index": {str(k): v for k, v in self.site_index.items()},
            "crop_shape": list(self.crop_shape),
            "epoch": self.epoch,
            "held_out_site": self.held_out_site,
            "train_subjects": self.train_subjects,
            "numpy_rng": self.rng_state.get("numpy"),
            "tensors": entries,
        }
        blob = json.dumps(header).encode()
        with path.open("wb") as fh:
            fh.write(CHECKPOINT_MAGIC)
            fh.write(len(blob).to_bytes(8, "little"))
            fh.write(blob)
            for chunk in chunks:
                fh.write(chunk)
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise SitegenError("checkpoint-not-found", str(path))
        raw = path.read_bytes()
        if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
            raise DataError("malformed-checkpoint", f"{path}: bad magic")
        start = len(CHECKPOINT_MAGIC)
        size = int.from_bytes(raw[start : start + 8], "little")
        header = json.loads(raw[start + 8 : start + 8 + size])
        payload = memoryview(raw)[start + 8 + size :]
        state, rng = {}, {}
        for entry in header["tensors"]:
            chunk = payload[entry["offset"] : entry["offset"] + entry["nbytes"]]
            array = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
            tensor = torch.from_numpy(array)
            if entry["name"] == "rng.torch":
                rng["torch"] = tensor
            else:
                state[entry["name"]] = tensor
        if header.get("numpy_rng") is not None:
            rng["numpy"] = header["numpy_rng"]
        return cls(
            state=state,
            site_index={int(k): int(v) for k, v in header["site_index"].items()},
            config=TrainConfig.from_dict(header["config"]),
            crop_shape=tuple(header["crop_shape"]),
            epoch=int(header["epoch"]),
            rng_state=rng,
            held_out_site=header.get("held_out_site"),
            train_subjects=list(header.get("train_subjects", [])),
        )


def make_model(config: TrainConfig, crop_shape: Sequence[int], num_sites: int) -> SiteGeneralizingSegmenter:
    return SiteGeneralizingSegmenter(
        crop_shape,
        num_sites=num_sites,
        width_multiplier=config.width_multiplier,
        use_main=config.use_main,
        use_augmentation=config.use_augmentation,
        use_site_adversary=config.use_site_adversary,
        grl_constant=config.grl_constant,
    )


# --------------------------------------------------------------------------
# training


def make_optimizer(model: SiteGeneralizingSegmenter, config: TrainConfig) -> torch.optim.Optimizer:
    weight_decay = config.l2_coefficient if config.decay_mode == "l2" else 0.0
    if config.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=config.learning_rate, weight_decay=weight_decay)
    return torch.optim.SGD(
        model.parameters(), lr=config.learning_rate, momentum=config.momentum, weight_decay=weight_decay
    )


def _epoch_order(n_items: int, item_sites: np.ndarray, balanced: bool, rng: np.random.Generator) -> np.ndarray:
    if not balanced:
        return rng.permutation(n_items)
    _, inverse, counts = np.unique(item_sites, return_inverse=True, return_counts=True)
    weights = 1.0 / counts[inverse]
    return rng.choice(n_items, size=n_items, replace=True, p=weights / weights.sum())


def batch_losses(model, slices: SliceSet, rows: np.ndarray, sides: np.ndarray | None, site_targets: torch.Tensor, config: TrainConfig):
    """Forward one batch; returns ``(dice, site, logits)`` (site/logits None without adversary)."""
    parents, pos = np.unique(rows, return_inverse=True)
    zs = torch.from_numpy(slices.images[parents])[:, None]
    brain = torch.from_numpy(slices.brain[parents])[:, None]
    lesion = torch.from_numpy(slices.lesion[parents])[:, None]
    if config.use_augmentation:
        pick = torch.from_numpy(np.stack([pos, sides], axis=1))
        targets = model.hemispheres(lesion)[pick[:, 0], pick[:, 1]]
    else:
        pick = None
        targets = lesion[torch.from_numpy(pos)]
        zs, brain = zs[torch.from_numpy(pos)], brain[torch.from_numpy(pos)]
    probs, bottleneck, _ = model.forward_training(zs, brain, pick)
    dice = dice_loss(probs, targets, config.dice_epsilon)
    if model.site is None:
        return dice, None, None
    logits = model.site_logits(bottleneck)
    return dice, site_loss(logits, site_targets), logits


def train(
    data: DatasetManifest | Sequence[Volume],
    held_out_site: int | None,
    config: TrainConfig,
    crop_shape: Sequence[int] | None = None,
    volumes: Sequence[Volume] | None = None,
) -> tuple[Checkpoint, TrainingCurves]:
    """Train on every site except ``held_out_site`` (``None`` trains on all)."""
    crop = _crop_for(data, crop_shape)
    if volumes is None:
        volumes = load_volumes(data)
    train_volumes = [v for v in volumes if v.site_id != held_out_site]
    if held_out_site is not None and any(v.site_id == held_out_site for v in train_volumes):
        raise AssertionError("held-out site leaked into training")
    slices = prepare_slices(train_volumes, crop)
    if len(slices) == 0:
        raise TrainingError("empty-training-set", f"no usable slices with held-out site {held_out_site}")
    site_ids = sorted(set(slices.site.tolist()))
    if config.use_site_adversary and len(site_ids) < 2:
        raise TrainingError("need-multiple-sites", f"site adversary needs >= 2 training sites, got {site_ids}")
    site_index = {s: i for i, s in enumerate(site_ids)}

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    model = make_model(config, crop, len(site_ids))
    optimizer = make_optimizer(model, config)

    n = len(slices)
    if config.use_augmentation:
        item_rows = np.repeat(np.arange(n), 2)
        item_sides = np.tile(np.array([0, 1]), n)
    else:
        item_rows, item_sides = np.arange(n), np.zeros(n, dtype=np.int64)
    item_sites = np.array([site_index[s] for s in slices.site[item_rows]], dtype=np.int64)

    curves = TrainingCurves()
    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr
        model.train()
        started = time.perf_counter()
        order = _epoch_order(len(item_rows), item_sites, config.balanced_sampling, rng)
        sums = {"total": 0.0, "dice": 0.0, "site": 0.0}
        correct = seen = batches = 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start : start + config.batch_size]
            if len(idx) < 2:
                # batch norm needs more than one sample per channel
                continue
            targets = torch.from_numpy(item_sites[idx])
            dice, site, logits = batch_losses(model, slices, item_rows[idx], item_sides[idx], targets, config)
            loss = dice if site is None else dice + site
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            optimizer.step()
            if not torch.isfinite(loss):
                raise TrainingError("non-finite-loss", f"epoch {epoch + 1}")
            batches += 1
            sums["total"] += loss.item()
            sums["dice"] += dice.item()
            if site is not None:
                sums["site"] += site.item()
                correct += int((logits.argmax(1) == targets).sum())
                seen += len(idx)
        stats = EpochStats(
            epoch=epoch + 1,
            total_loss=sums["total"] / max(batches, 1),
            site_accuracy=correct / seen if seen else float("nan"),
            dice_loss=sums["dice"] / max(batches, 1),
            site_loss=sums["site"] / max(batches, 1),
            lr=lr,
            seconds=time.perf_counter() - started,
        )
        curves.epochs.append(stats)
        log.info(
            "epoch %d/%d loss %.4f dice %.4f site %.4f acc %.3f (%.1fs)",
            stats.epoch, config.epochs, stats.total_loss, stats.dice_loss,
            stats.site_loss, stats.site_accuracy, stats.seconds,
        )

    model.eval()
    checkpoint = Checkpoint(
        state={k: v.detach().clone() for k, v in model.state_dict().items()},
        site_index=site_index,
        config=config,
        crop_shape=tuple(crop),
        epoch=config.epochs,
        rng_state={"torch": torch.get_rng_state(), "numpy": rng.bit_generator.state},
        held_out_site=held_out_site,
        train_subjects=sorted({v.subject_id for v in train_volumes}),
    )
    return checkpoint, curves


# --------------------------------------------------------------------------
# inference and evaluation


def predict_volume(model: SiteGeneralizingSegmenter, volume: Volume, crop: Sequence[int], threshold: float = 0.5, batch_size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    """Binary prediction and matching truth on the cropped volume.

    Slices without usable brain are predicted as background.
    """
    slices = prepare_slices([volume], crop)
    truth = crop_slice(volume.lesion_mask, crop).astype(np.uint8)
    pred = np.zeros(truth.shape, dtype=np.uint8)
    model.eval()
    for start in range(0, len(slices), batch_size):
        sl = slice(start, start + batch_size)
        zs = torch.from_numpy(slices.images[sl])[:, None]
        brain = torch.from_numpy(slices.brain[sl])[:, None]
        probs = model.segment(zs, brain)[:, 0].numpy()
        pred[slices.slice_index[sl]] = (probs > threshold).astype(np.uint8)
    return pred, truth


def evaluate(checkpoint: Checkpoint | SiteGeneralizingSegmenter, volumes: Iterable[Volume], crop: Sequence[int] | None = None, voxelwise_f1: bool = False) -> list[SubjectMetrics]:
    if isinstance(checkpoint, Checkpoint):
        model, crop = checkpoint.build_model(), crop or checkpoint.crop_shape
    else:
        model = checkpoint
    results = []
    for vol in volumes:
        pred, truth = predict_volume(model, vol, crop)
        results.append(subject_metrics(pred, truth, vol.subject_id, vol.site_id, voxelwise_f1=voxelwise_f1))
    return results


ABLATION_FLAGS = ("use_augmentation", "use_site_adversary", "use_main")


def flag_grid(rows: Iterable[Sequence[bool]] | None = None) -> list[tuple[bool, bool, bool]]:
    """(DA, SL, MAIN) combinations; all eight by default."""
    if rows is None:
        return [(bool(a), bool(b), bool(c)) for a in (0, 1) for b in (0, 1) for c in (0, 1)]
    out = []
    for row in rows:
        row = tuple(bool(v) for v in row)
        if len(row) != 3:
            raise ValueError("each flag row is (DA, SL, MAIN)")
        if row not in out:
            out.append(row)
    return out


def run_ablation(
    data: DatasetManifest | Sequence[Volume],
    site: int,
    flags_grid: Iterable[Sequence[bool]] | None,
    config: TrainConfig,
    seeds: Sequence[int] | None = None,
    crop_shape: Sequence[int] | None = None,
    volumes: Sequence[Volume] | None = None,
) -> list[dict]:
    """Train each flag combination with site ``site`` held out and score it there."""
    crop = _crop_for(data, crop_shape)
    if volumes is None:
        volumes = load_volumes(data)
    test = [v for v in volumes if v.site_id == site]
    if not test:
        raise DataError("unknown-site", f"no subjects for site {site}")
    rows = []
    for da, sl, main in flag_grid(flags_grid):
        for seed in seeds if seeds is not None else [config.seed]:
            cfg = TrainConfig(**{**config.to_dict(), "seed": seed}).with_flags(da, sl, main)
            checkpoint, curves = train(data, site, cfg, crop, volumes=volumes)
            metrics = evaluate(checkpoint, test, crop)
            rows.append(
                {
                    "site": site,
                    "DA": da,
                    "SL": sl,
                    "MAIN": main,
                    "seed": seed,
                    "dice": float(np.mean([m.dice for m in metrics])),
                    "recall": float(np.mean([m.recall for m in metrics])),
                    "f1": float(np.mean([m.f1 for m in metrics])),
                    "final_loss": curves.epochs[-1].total_loss,
                    "subjects": [m.as_dict() for m in metrics],
                }
            )
    return rows
