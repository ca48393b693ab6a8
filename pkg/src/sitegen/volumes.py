"""Volumes, slices, on-disk format, masked z-scoring and the synthetic phantom.

A subject lives in a directory holding ``meta.json`` plus three raw
little-endian float32 payloads (``image.raw``, ``brainmask.raw``,
``lesion.raw``) in slice-major, row-major order.
"""

from __future__ import annotations

import json
import os
from dataclasses import astuple, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError

RAW_DTYPE = np.dtype("<f4")
PAYLOADS = {"intensities": "image.raw", "brain_mask": "brainmask.raw", "lesion_mask": "lesion.raw"}

# Canonical phantom intensities; only the ordering CSF > WM > GM matters.
CSF, WM, GM, BACKGROUND = 1.0, 0.7, 0.5, 0.0
LESION = 0.3

SIDES = ("full", "left", "right")


@dataclass
class Volume:
    intensities: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    site_id: int
    subject_id: str

    def __post_init__(self):
        self.intensities = np.asarray(self.intensities)
        self.brain_mask = np.asarray(self.brain_mask)
        self.lesion_mask = np.asarray(self.lesion_mask)
        self.validate()

    def validate(self) -> None:
        shape = self.intensities.shape
        if self.intensities.ndim != 3:
            raise DataError("shape-mismatch", f"intensities must be 3D, got {shape}")
        if self.brain_mask.shape != shape or self.lesion_mask.shape != shape:
            raise DataError(
                "shape-mismatch",
                f"masks {self.brain_mask.shape}/{self.lesion_mask.shape} != image {shape}",
            )
        if not self.brain_mask.any():
            raise DataError("empty-brain-mask", f"subject {self.subject_id}")
        if np.any((self.lesion_mask != 0) & (self.brain_mask == 0)):
            raise DataError("lesion-outside-brain", f"subject {self.subject_id}")
        if self.site_id < 0:
            raise DataError("bad-site-id", str(self.site_id))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape

    def __eq__(self, other):
        if not isinstance(other, Volume):
            return NotImplemented
        return (
            self.site_id == other.site_id
            and self.subject_id == other.subject_id
            and np.array_equal(self.intensities, other.intensities)
            and np.array_equal(self.brain_mask, other.brain_mask)
            and np.array_equal(self.lesion_mask, other.lesion_mask)
        )


@dataclass
class SliceSample:
    image: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    site_id: int
    side: str = "full"
    subject_id: str = ""
    slice_index: int = 0

    def __post_init__(self):
        if self.side not in SIDES:
            raise ValueError(f"side must be one of {SIDES}, got {self.side!r}")
        if self.brain_mask.shape != self.image.shape or self.lesion_mask.shape != self.image.shape:
            raise DataError("shape-mismatch", "slice masks must match the image")


@dataclass
class ManifestEntry:
    subject_id: str
    site_id: int
    path: Path


@dataclass
class DatasetManifest:
    subjects: list[ManifestEntry]
    crop_shape: tuple[int, int]
    num_sites: int
    root: Path = Path(".")
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        sites = {s.site_id for s in self.subjects}
        if sites != set(range(self.num_sites)):
            raise DataError(
                "bad-manifest", f"site ids {sorted(sites)} do not cover range(0, {self.num_sites})"
            )
        ids = [s.subject_id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("bad-manifest", "duplicate subject ids")

    def site_subjects(self, site_id: int) -> list[ManifestEntry]:
        return [s for s in self.subjects if s.site_id == site_id]

    def resolve(self, entry: ManifestEntry) -> Path:
        return entry.path if entry.path.is_absolute() else self.root / entry.path

    def check_files(self) -> None:
        for entry in self.subjects:
            subject_dir = self.resolve(entry)
            for name in ("meta.json", *PAYLOADS.values()):
                if not (subject_dir / name).exists():
                    raise DataError("missing-file", str(subject_dir / name))

    def load(self, entry: ManifestEntry) -> Volume:
        return load_volume(self.resolve(entry))


# --------------------------------------------------------------------------
# masked z-score


def _masked_moments(values: np.ndarray, mask: np.ndarray) -> tuple[float, float]:
    inside = values[mask != 0].astype(np.float64)
    if inside.size == 0:
        raise DataError("empty-brain-mask")
    mu = inside.mean()
    sigma = inside.std()  # population
    if sigma < 1e-12:
        raise DataError("degenerate-intensities", f"in-mask std {sigma:g}")
    return mu, sigma


def zscore_array(image: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Z-score ``image`` with statistics taken inside ``mask``; zero outside it."""
    mu, sigma = _masked_moments(image, mask)
    out = (image.astype(np.float64) - mu) / sigma
    out[mask == 0] = 0.0
    return out


def zscore_normalize(volume: Volume, per_slice: bool = False) -> Volume:
    """Masked z-score of a whole volume.

    With ``per_slice=True`` each axial slice is normalized with its own in-mask
    statistics; slices with an empty or constant brain region are zeroed.
    """
    if not per_slice:
        out = zscore_array(volume.intensities, volume.brain_mask)
    else:
        if not volume.brain_mask.any():
            raise DataError("empty-brain-mask")
        out = np.zeros(volume.shape, dtype=np.float64)
        for d in range(volume.shape[0]):
            m = volume.brain_mask[d]
            if not m.any():
                continue
            try:
                out[d] = zscore_array(volume.intensities[d], m)
            except DataError as err:
                if err.code != "degenerate-intensities":
                    raise
    return replace(volume, intensities=out.astype(np.float32))


def zscore_slice(sample: SliceSample) -> SliceSample:
    return replace(sample, image=zscore_array(sample.image, sample.brain_mask).astype(np.float32))


# --------------------------------------------------------------------------
# cropping and slicing


def crop_offsets(source: Sequence[int], target: Sequence[int]) -> tuple[int, int]:
    (h0, w0), (h, w) = source[-2:], target
    if h > h0 or w > w0:
        raise DataError("crop-too-large", f"target {(h, w)} exceeds source {(h0, w0)}")
    return (h0 - h) // 2, (w0 - w) // 2


def crop_slice(array: np.ndarray, target: Sequence[int]) -> np.ndarray:
    """Center crop the last two axes to ``target`` using floor offsets."""
    h, w = target
    top, left = crop_offsets(array.shape, target)
    return array[..., top : top + h, left : left + w]


def crop_volume(volume: Volume, target: Sequence[int]) -> Volume:
    return replace(
        volume,
        intensities=crop_slice(volume.intensities, target),
        brain_mask=crop_slice(volume.brain_mask, target),
        lesion_mask=crop_slice(volume.lesion_mask, target),
    )


def extract_slices(volume: Volume, crop: Sequence[int]) -> list[SliceSample]:
    cropped = [crop_slice(a, crop) for a in (volume.intensities, volume.brain_mask, volume.lesion_mask)]
    return [
        SliceSample(
            image=cropped[0][d],
            brain_mask=cropped[1][d],
            lesion_mask=cropped[2][d],
            site_id=volume.site_id,
            side="full",
            subject_id=volume.subject_id,
            slice_index=d,
        )
        for d in range(volume.shape[0])
    ]


def stack_slices(samples: Sequence[SliceSample], attr: str = "lesion_mask") -> np.ndarray:
    ordered = sorted(samples, key=lambda s: s.slice_index)
    return np.stack([getattr(s, attr) for s in ordered])


def threshold_brain_mask(intensities: np.ndarray, threshold: float = 0.0) -> np.ndarray:
    """Brain mask for skull-stripped real data: voxels brighter than ``threshold``."""
    return (intensities > threshold).astype(np.float32)


# --------------------------------------------------------------------------
# canonical on-disk format


def save_volume(volume: Volume, path: str | os.PathLike) -> Path:
    subject_dir = Path(path)
    subject_dir.mkdir(parents=True, exist_ok=True)
    meta = {
        "subject_id": volume.subject_id,
        "site_id": int(volume.site_id),
        "shape": [int(s) for s in volume.shape],
        "dtype": "float32-le",
        "order": "slice-major row-major",
    }
    for attr, name in PAYLOADS.items():
        data = np.ascontiguousarray(getattr(volume, attr), dtype=RAW_DTYPE)
        (subject_dir / name).write_bytes(data.tobytes())
    (subject_dir / "meta.json").write_text(json.dumps(meta, indent=2))
    return subject_dir


def load_volume(path: str | os.PathLike) -> Volume:
    subject_dir = Path(path)
    meta_path = subject_dir / "meta.json"
    if not meta_path.exists():
        raise DataError("missing-file", str(meta_path))
    try:
        meta = json.loads(meta_path.read_text())
        shape = tuple(int(s) for s in meta["shape"])
        subject_id, site_id = str(meta["subject_id"]), int(meta["site_id"])
    except (KeyError, TypeError, ValueError) as err:
        raise DataError("malformed-header", f"{meta_path}: {err}") from err
    if len(shape) != 3 or meta.get("dtype", "float32-le") != "float32-le":
        raise DataError("malformed-header", f"{meta_path}: shape {shape}, dtype {meta.get('dtype')}")

    arrays = {}
    expected = int(np.prod(shape))
    for attr, name in PAYLOADS.items():
        raw_path = subject_dir / name
        if not raw_path.exists():
            raise DataError("missing-file", str(raw_path))
        raw = np.frombuffer(raw_path.read_bytes(), dtype=RAW_DTYPE)
        if raw.size != expected:
            raise DataError(
                "shape-mismatch", f"{raw_path}: {raw.size} values, header shape {shape} needs {expected}"
            )
        arrays[attr] = raw.reshape(shape).astype(np.float32)
    for attr in ("brain_mask", "lesion_mask"):
        if not np.isin(arrays[attr], (0.0, 1.0)).all():
            raise DataError("malformed-mask", f"{subject_dir / PAYLOADS[attr]} is not binary")
    return Volume(site_id=site_id, subject_id=subject_id, **arrays)


def write_manifest(manifest: DatasetManifest, path: str | os.PathLike) -> Path:
    path = Path(path)
    doc = {
        "num_sites": manifest.num_sites,
        "crop_shape": list(manifest.crop_shape),
        "subjects": [
            {"subject_id": s.subject_id, "site_id": s.site_id, "path": str(s.path)}
            for s in manifest.subjects
        ],
        **manifest.extra,
    }
    path.write_text(json.dumps(doc, indent=2))
    return path


def read_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise DataError("missing-file", str(path))
    try:
        doc = json.loads(path.read_text())
        subjects = [
            ManifestEntry(str(s["subject_id"]), int(s["site_id"]), Path(s["path"])) for s in doc["subjects"]
        ]
        crop = tuple(int(v) for v in doc["crop_shape"])
        num_sites = int(doc["num_sites"])
    except (KeyError, TypeError, ValueError, json.JSONDecodeError) as err:
        raise DataError("malformed-manifest", f"{path}: {err}") from err
    extra = {k: v for k, v in doc.items() if k not in ("num_sites", "crop_shape", "subjects")}
    manifest = DatasetManifest(subjects, crop, num_sites, root=path.parent, extra=extra)
    if check_files:
        manifest.check_files()
    return manifest


# --------------------------------------------------------------------------
# synthetic multi-site phantom


@dataclass(frozen=True)
class SiteParams:
    """Per-site monotone intensity distortion ``gain * c**gamma + offset + noise``."""

    gain: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    noise: float = 0.0

    def validate(self) -> None:
        ok = (
            all(np.isfinite([self.gain, self.offset, self.gamma, self.noise]))
            and self.gain > 0
            and self.gamma > 0
            and self.noise >= 0
        )
        if not ok:
            raise DataError("bad-site-params", repr(self))


@dataclass
class Phantom:
    canonical: np.ndarray
    brain_mask: np.ndarray
    lesion_mask: np.ndarray
    tissue: np.ndarray  # 0 background, 1 GM, 2 WM, 3 CSF
    lesion_centers: list[tuple[int, int, int]]


def synthetic_phantom(shape: Sequence[int], rng: np.random.Generator) -> Phantom:
    """Noise-free canonical brain: nested GM/WM/CSF bands plus 1-3 lesions.

    The brain is mirror-symmetric about the vertical midline of the array, so
    any even-width center crop keeps the midline at the crop's center.
    """
    depth, height, width = (int(s) for s in shape)
    z = (np.arange(depth) - (depth - 1) / 2) / (depth / 2)
    y = np.arange(height) - (height - 1) / 2
    x = np.abs(np.arange(width) - (width - 1) / 2)
    zz, yy, xx = np.meshgrid(z, y, x, indexing="ij")

    ry = 0.42 * height * rng.uniform(0.9, 1.0)
    rx = 0.40 * width * rng.uniform(0.9, 1.0)
    profile = np.sqrt(np.clip(1.0 - (zz / 1.15) ** 2, 0.05, None))
    angle = np.arctan2(yy, xx + 1e-9)
    lobes, phase = rng.integers(3, 6), rng.uniform(0, 2 * np.pi)
    wobble = 1.0 + 0.05 * np.sin(lobes * angle + phase)
    radius = np.sqrt((xx / rx) ** 2 + (yy / ry) ** 2) / profile * wobble

    inner = rng.uniform(0.25, 0.32)
    cortex = rng.uniform(0.68, 0.76)
    tissue = np.zeros(radius.shape, dtype=np.int8)
    tissue[radius <= 1.0] = 1
    tissue[radius <= cortex] = 2
    tissue[radius <= inner] = 3
    canonical = np.choose(tissue, [BACKGROUND, GM, WM, CSF]).astype(np.float64)
    brain = tissue > 0

    cols = np.arange(width)
    rows = np.arange(height)
    lesion = np.zeros(radius.shape, dtype=bool)
    weight = np.zeros(radius.shape)
    centers = []
    for _ in range(int(rng.integers(1, 4))):
        d = int(rng.integers(int(0.2 * depth), max(int(0.8 * depth), int(0.2 * depth) + 1)))
        inside = np.argwhere((tissue[d] == 1) | (tissue[d] == 2))
        # keep centers clear of the midline so they sit in one hemisphere
        inside = inside[np.abs(inside[:, 1] - (width - 1) / 2) > 0.12 * width]
        if inside.size == 0:
            continue
        r, c = inside[rng.integers(len(inside))]
        ay = rng.uniform(0.04, 0.11) * height
        ax = rng.uniform(0.04, 0.11) * width
        az = rng.uniform(0.6, 2.5)
        rho = np.sqrt(
            ((np.arange(depth) - d) / az)[:, None, None] ** 2
            + ((rows - r) / ay)[None, :, None] ** 2
            + ((cols - c) / ax)[None, None, :] ** 2
        )
        blob = (rho <= 1.0) & brain
        lesion |= blob
        # soft rim: full lesion contrast in the core, fading towards the boundary
        weight = np.maximum(weight, np.where(blob, np.clip((1.0 - rho) / 0.4, 0.25, 1.0), 0.0))
        centers.append((d, int(r), int(c)))

    canonical = (1.0 - weight) * canonical + weight * LESION
    return Phantom(canonical, brain.astype(np.float32), lesion.astype(np.float32), tissue, centers)


def distort(canonical: np.ndarray, params: SiteParams, rng: np.random.Generator | None = None) -> np.ndarray:
    observed = params.gain * np.power(canonical, params.gamma) + params.offset
    if params.noise > 0:
        if rng is None:
            raise ValueError("noise requires an rng")
        observed = observed + rng.normal(0.0, params.noise, size=canonical.shape)
    return observed


def generate_synthetic_site(
    site_id: int,
    num_subjects: int,
    shape: Sequence[int],
    rng_seed: int,
    site_params: SiteParams | Sequence[float],
    subject_prefix: str = "",
) -> list[Volume]:
    """Phantom subjects for one site, deterministic in ``rng_seed``.

    Geometry and noise use separate child streams, so the noise-free anatomy for
    a seed does not depend on the site's noise level.
    """
    if not isinstance(site_params, SiteParams):
        site_params = SiteParams(*site_params)
    site_params.validate()
    if len(shape) != 3 or min(shape) < 1:
        raise DataError("invalid-shape", f"shape must be (D, H, W), got {tuple(shape)}")

    volumes = []
    root = np.random.SeedSequence([int(rng_seed), int(site_id)])
    for index, child in enumerate(root.spawn(num_subjects)):
        geom_seq, noise_seq = child.spawn(2)
        phantom = synthetic_phantom(shape, np.random.default_rng(geom_seq))
        observed = distort(phantom.canonical, site_params, np.random.default_rng(noise_seq))
        volumes.append(
            Volume(
                intensities=observed.astype(np.float32),
                brain_mask=phantom.brain_mask,
                lesion_mask=phantom.lesion_mask,
                site_id=int(site_id),
                subject_id=f"{subject_prefix}site{site_id}-sub{index:03d}",
            )
        )
    return volumes


def phantom_for_subject(shape: Sequence[int], rng_seed: int, site_id: int, index: int, num_subjects: int) -> Phantom:
    """Noise-free phantom matching subject ``index`` of :func:`generate_synthetic_site`."""
    child = np.random.SeedSequence([int(rng_seed), int(site_id)]).spawn(num_subjects)[index]
    geom_seq, _ = child.spawn(2)
    return synthetic_phantom(shape, np.random.default_rng(geom_seq))


# gains step by 0.6 so sites 0-2 are (1.0, 1.6, 2.2); the rest cycle
_GAMMAS = (1.0, 0.9, 1.2)
_OFFSETS = (0.0, 0.1, -0.05)
_NOISES = (0.03, 0.05, 0.04)


def default_site_params(num_sites: int) -> list[SiteParams]:
    return [
        SiteParams(1.0 + 0.6 * k, _OFFSETS[k % 3], _GAMMAS[k % 3], _NOISES[k % 3]) for k in range(num_sites)
    ]


def default_crop(shape: Sequence[int]) -> tuple[int, int]:
    """Largest centred crop the U-Net accepts on full slices and on hemispheres."""
    _, h, w = shape
    crop = (h - h % 16, w - w % 32)
    if min(crop) < 1:
        raise DataError("invalid-shape", f"slices of {h}x{w} are too small; need H >= 16 and W >= 32")
    return crop


def write_synthetic_dataset(
    out_dir: str | os.PathLike,
    num_sites: int,
    subjects_per_site: int,
    shape: Sequence[int],
    seed: int,
    site_params: Sequence[SiteParams] | None = None,
    crop: Sequence[int] | None = None,
) -> DatasetManifest:
    """Generate every site, write canonical subject directories and ``manifest.json``."""
    if num_sites < 1 or subjects_per_site < 1:
        raise DataError("invalid-count", "need at least one site and one subject per site")
    if len(shape) != 3 or min(shape) < 1:
        raise DataError("invalid-shape", f"shape must be (D, H, W), got {tuple(shape)}")
    crop = tuple(crop) if crop is not None else default_crop(shape)
    params = list(site_params) if site_params is not None else default_site_params(num_sites)
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError("unwritable-output", f"{out_dir}: {err}") from err
    entries = []
    for site in range(num_sites):
        for vol in generate_synthetic_site(site, subjects_per_site, shape, seed, params[site]):
            save_volume(vol, out_dir / vol.subject_id)
            entries.append(ManifestEntry(vol.subject_id, site, Path(vol.subject_id)))
    extra = {"generator": {"seed": seed, "shape": list(shape), "site_params": [list(astuple(p)) for p in params]}}
    manifest = DatasetManifest(entries, crop, num_sites, root=out_dir, extra=extra)
    write_manifest(manifest, out_dir / "manifest.json")
    return manifest
