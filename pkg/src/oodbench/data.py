"""Synthetic ID/OOD image generators, IDX ingestion, standardization and batching."""
from __future__ import annotations

import csv
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

OOD_KINDS = ("uniform_noise", "gaussian_noise", "shifted_templates", "held_out_classes")
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class IdxFormatError(ValueError):
    pass


class BadMagicError(IdxFormatError):
    pass


class TruncatedPayloadError(IdxFormatError):
    pass


class CountMismatchError(IdxFormatError):
    pass


@dataclass
class Dataset:
    """Standardized images (N×C×H×W) plus the per-channel stats used to get there."""

    images: np.ndarray
    labels: np.ndarray
    id: str
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.images.ndim != 4:
            raise ValueError(f"images must be N×C×H×W, got {self.images.shape}")
        if len(self.labels) not in (0, len(self.images)):
            raise ValueError("labels must be empty or one per image")

    def __len__(self) -> int:
        return len(self.images)

    @property
    def labeled(self) -> bool:
        return len(self.labels) > 0

    def raw(self) -> np.ndarray:
        return self.images * self.std[None, :, None, None] + self.mean[None, :, None, None]

    def subset(self, idx, suffix: str = "") -> "Dataset":
        labels = self.labels[idx] if self.labeled else self.labels
        return Dataset(self.images[idx], labels, self.id + suffix, self.mean, self.std)


def channel_stats(raw: np.ndarray) -> tuple:
    if len(raw) == 0:
        return np.zeros(raw.shape[1]), np.ones(raw.shape[1])
    mean = raw.mean(axis=(0, 2, 3))
    std = raw.std(axis=(0, 2, 3))
    return mean, np.where(std > 0, std, 1.0)


def standardize(raw: np.ndarray, labels, ds_id: str, stats: Optional[tuple] = None) -> Dataset:
    """Standardize ``raw`` with ``stats`` (mean, std) or with its own channel stats."""
    mean, std = channel_stats(raw) if stats is None else (np.asarray(stats[0]), np.asarray(stats[1]))
    images = (raw - mean[None, :, None, None]) / std[None, :, None, None]
    return Dataset(images, labels, ds_id, mean, std)


# ----------------------------------------------------------------------
# synthetic data
# ----------------------------------------------------------------------
@dataclass(frozen=True)
class SyntheticSpec:
    num_classes: int = 4
    samples_per_class: int = 1000
    test_per_class: int = 250
    image_size: int = 16
    channels: int = 1
    angles: Optional[tuple] = None  # radians; default evenly spaced over [0, pi)
    frequencies: Optional[tuple] = None  # cycles per image; default 2
    phases: Optional[tuple] = None
    contrast: float = 0.3  # template amplitude; 1 spans [0, 1]
    noise_sigma: float = 0.3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1 or self.image_size < 1 or self.channels < 1:
            raise ValueError("num_classes, image_size and channels must be positive")
        if self.samples_per_class < 0 or self.test_per_class < 0:
            raise ValueError("sample counts must be non-negative")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        for name in ("angles", "frequencies", "phases"):
            v = getattr(self, name)
            if v is not None:
                v = tuple(float(a) for a in v)
                if len(v) != self.num_classes:
                    raise ValueError(f"{name} needs {self.num_classes} entries")
                object.__setattr__(self, name, v)

    def class_angles(self) -> np.ndarray:
        if self.angles is not None:
            return np.array(self.angles)
        return np.pi * np.arange(self.num_classes) / self.num_classes

    def class_frequencies(self) -> np.ndarray:
        return np.array(self.frequencies) if self.frequencies is not None else np.full(self.num_classes, 2.0)

    def class_phases(self) -> np.ndarray:
        return np.array(self.phases) if self.phases is not None else np.zeros(self.num_classes)

    def templates(self) -> list:
        """(angle, frequency, phase) triples, one per ID class."""
        return list(zip(self.class_angles(), self.class_frequencies(), self.class_phases()))

    def held_out_templates(self) -> list:
        # interleaved orientations at double frequency: never equal to an ID template
        k = self.num_classes
        return [(a + np.pi / (2 * k), 2.0 * f, ph) for a, f, ph in self.templates()]

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


def render_template(
    angle: float, freq: float, phase: float, size: int, channels: int = 1, contrast: float = 1.0
) -> np.ndarray:
    """A sinusoidal grating centred on 0.5 with peak-to-peak ``contrast``, shape C×size×size."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    arg = 2 * np.pi * freq * (xx * np.cos(angle) + yy * np.sin(angle)) / size + phase
    plane = 0.5 + 0.5 * contrast * np.sin(arg)
    return np.repeat(plane[None], channels, axis=0)


def _render_set(templates, counts, spec: SyntheticSpec, rng) -> tuple:
    raw, labels = [], []
    for cls, ((a, f, ph), n) in enumerate(zip(templates, counts)):
        tpl = render_template(a, f, ph, spec.image_size, spec.channels, spec.contrast)
        noise = rng.normal(0.0, 1.0, size=(n,) + tpl.shape) * spec.noise_sigma
        raw.append(tpl[None] + noise)
        labels.append(np.full(n, cls))
    return np.concatenate(raw), np.concatenate(labels)


def gen_synthetic_id(spec: SyntheticSpec, split: str = "train", stats: Optional[tuple] = None) -> Dataset:
    """Class templates plus Gaussian pixel noise, standardized.

    The train split standardizes with its own stats; pass the train stats for
    other splits.
    """
    splits = {"train": (0, spec.samples_per_class), "test": (1, spec.test_per_class)}
    if split not in splits:
        raise ValueError(f"unknown split {split!r}")
    stream, n = splits[split]
    rng = np.random.default_rng([spec.seed, stream])
    raw, labels = _render_set(spec.templates(), [n] * spec.num_classes, spec, rng)
    return standardize(raw, labels, f"synthetic-{split}", stats)


def gen_ood(
    kind: str,
    size: int,
    seed: int,
    id_spec: Optional[SyntheticSpec] = None,
    stats: Optional[tuple] = None,
    shift: Optional[float] = None,
) -> Dataset:
    """Unlabeled OOD set standardized with the ID ``stats``."""
    if kind not in OOD_KINDS:
        raise ValueError(f"unknown OOD kind {kind!r}; expected one of {OOD_KINDS}")
    if size < 0:
        raise ValueError("size must be non-negative")
    id_spec = id_spec or SyntheticSpec()
    shape = (id_spec.channels, id_spec.image_size, id_spec.image_size)
    rng = np.random.default_rng([seed, 1000 + OOD_KINDS.index(kind)])
    if kind == "uniform_noise":
        raw = rng.uniform(0.0, 1.0, size=(size,) + shape)
    elif kind == "gaussian_noise":
        raw = rng.normal(0.5, 0.25, size=(size,) + shape)
    else:
        if kind == "held_out_classes":
            templates = id_spec.held_out_templates()
        else:
            delta = np.pi / (2 * id_spec.num_classes) if shift is None else shift
            templates = [(a + delta, f, ph) for a, f, ph in id_spec.templates()]
        k = len(templates)
        counts = [size // k + (1 if i < size % k else 0) for i in range(k)]
        raw, _ = _render_set(templates, counts, id_spec, rng)
    return standardize(raw, [], kind, stats)


def write_manifest(path, spec: SyntheticSpec, datasets) -> None:
    """Audit CSV: one row per dataset with size, template parameters and stats."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["dataset_id", "size", "labeled", "channel_mean", "channel_std", "templates"])
        for d in datasets:
            if d.id.startswith("synthetic"):
                tpl = spec.templates()
            elif d.id == "held_out_classes":
                tpl = spec.held_out_templates()
            else:
                tpl = []
            tpl_s = ";".join(f"{a!r}/{f!r}/{p!r}" for a, f, p in tpl)
            w.writerow(
                [d.id, len(d), int(d.labeled), " ".join(map(repr, d.mean.tolist())),
                 " ".join(map(repr, d.std.tolist())), tpl_s]
            )


# ----------------------------------------------------------------------
# IDX
# ----------------------------------------------------------------------
def _parse_idx(blob: bytes, magic: int, ndim: int, path) -> np.ndarray:
    header = 4 + 4 * ndim
    if len(blob) < 4:
        raise TruncatedPayloadError(f"{path}: file shorter than the magic number")
    (got,) = struct.unpack(">I", blob[:4])
    if got != magic:
        raise BadMagicError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    if len(blob) < header:
        raise TruncatedPayloadError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", blob[4:header])
    n = int(np.prod(dims, dtype=np.int64))
    if len(blob) - header < n:
        raise TruncatedPayloadError(f"{path}: payload has {len(blob) - header} bytes, header declares {n}")
    return np.frombuffer(blob, dtype=np.uint8, count=n, offset=header).reshape(dims)


def read_idx(path_images, path_labels=None, stats: Optional[tuple] = None, ds_id: Optional[str] = None) -> Dataset:
    """Parse an IDX image file (and optional label file) into a standardized Dataset.

    Pixels are scaled to [0, 1] before standardization.
    """
    imgs = _parse_idx(Path(path_images).read_bytes(), IDX_IMAGES_MAGIC, 3, path_images)
    raw = imgs.astype(np.float64)[:, None, :, :] / 255.0
    labels = np.zeros(0, dtype=np.int64)
    if path_labels is not None:
        labels = _parse_idx(Path(path_labels).read_bytes(), IDX_LABELS_MAGIC, 1, path_labels).astype(np.int64)
        if len(labels) != len(raw):
            raise CountMismatchError(f"{len(raw)} images but {len(labels)} labels")
    return standardize(raw, labels, ds_id or Path(path_images).stem, stats)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as IDX (3-D images or 1-D labels)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {3: IDX_IMAGES_MAGIC, 1: IDX_LABELS_MAGIC}.get(array.ndim)
    if magic is None:
        raise ValueError("only 1-D label and 3-D image arrays are supported")
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


# ----------------------------------------------------------------------
# batching
# ----------------------------------------------------------------------
def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batches(d: Dataset, batch_size: int, seed: int, epoch: int) -> Iterator[tuple]:
    """Shuffled (images, labels) batches; the last partial batch is kept."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    perm = epoch_permutation(len(d), seed, epoch)
    for start in range(0, len(d), batch_size):
        idx = perm[start : start + batch_size]
        yield d.images[idx], (d.labels[idx] if d.labeled else d.labels)
