"""Dataset ingestion: CIFAR binary archives, corruption arrays, and a
synthetic generator that plants a label-correlated but task-irrelevant
watermark cell.

CIFAR-10 batches are 3073-byte records (1 label byte + 3072 pixel bytes,
channel-planar); CIFAR-100 uses 3074-byte records (coarse + fine label
bytes). Corruption sets are uint8 npy arrays of shape (N, 32, 32, 3) with a
shared labels file. All pixel data is scaled to [0, 1].
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .detection import FeatureTemplate
from .errors import ConfigurationError, IngestionError
from .models import LabeledBatch

CIFAR10_TRAIN_FILES = tuple(f"data_batch_{i}.bin" for i in range(1, 6))
CIFAR10_TEST_FILES = ("test_batch.bin",)
SEVERITY_BLOCK = 10000  # images per severity level in corruption files


def _read_cifar_file(path, label_bytes, num_classes):
    record = label_bytes + 3072
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise IngestionError(f"{path}: {exc}") from exc
    if raw.size == 0 or raw.size % record:
        raise IngestionError(f"{path}: size {raw.size} is not a multiple of {record}-byte records")
    raw = raw.reshape(-1, record)
    labels = raw[:, label_bytes - 1].astype(np.int64)  # fine label is the last label byte
    if labels.max() >= num_classes:
        raise IngestionError(f"{path}: label {labels.max()} outside [0,{num_classes})")
    pixels = raw[:, label_bytes:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return pixels, labels


def load_cifar(path, variant: str = "cifar10"):
    """Load the binary archives under ``path``; returns (train, test) batches."""
    if variant == "cifar10":
        label_bytes, k = 1, 10
        train_files, test_files = CIFAR10_TRAIN_FILES, CIFAR10_TEST_FILES
    elif variant == "cifar100":
        label_bytes, k = 2, 100
        train_files, test_files = ("train.bin",), ("test.bin",)
    else:
        raise ConfigurationError(f"unknown variant {variant!r}")

    def _load(files):
        xs, ys = [], []
        for name in files:
            fpath = os.path.join(path, name)
            if not os.path.exists(fpath):
                raise IngestionError(f"missing dataset file: {fpath}")
            x, y = _read_cifar_file(fpath, label_bytes, k)
            xs.append(x)
            ys.append(y)
        return LabeledBatch(np.concatenate(xs), np.concatenate(ys))

    return _load(train_files), _load(test_files)


def load_corruptions(directory, severity: int | None = None, labels_file: str = "labels.npy"):
    """Map corruption tag (filename stem) to a labeled batch.

    ``severity`` in 1..5 selects that severity's contiguous 10,000-image
    block; None keeps all rows. Files whose shape does not match are skipped
    with a warning; a labels length mismatch is an ingestion error.
    """
    labels_path = os.path.join(directory, labels_file)
    if not os.path.exists(labels_path):
        raise IngestionError(f"missing labels file: {labels_path}")
    labels = np.load(labels_path).astype(np.int64)
    if severity is not None and not 1 <= severity <= 5:
        raise ConfigurationError("severity must be in 1..5")
    out = {}
    for name in sorted(os.listdir(directory)):
        if not name.endswith(".npy") or name == labels_file:
            continue
        arr = np.load(os.path.join(directory, name), mmap_mode="r")
        if arr.ndim != 4 or arr.shape[1:] != (32, 32, 3):
            warnings.warn(f"skipping {name}: shape {arr.shape} is not (N, 32, 32, 3)")
            continue
        if arr.shape[0] != labels.shape[0]:
            raise IngestionError(
                f"{name}: {arr.shape[0]} images but {labels.shape[0]} labels"
            )
        sel = slice(None)
        if severity is not None:
            sel = slice((severity - 1) * SEVERITY_BLOCK, severity * SEVERITY_BLOCK)
        x = np.moveaxis(np.asarray(arr[sel], dtype=np.float32) / 255.0, -1, 1)
        out[name[: -len(".npy")]] = LabeledBatch(x, labels[sel])
    return out


def stratified_subsample(data: LabeledBatch, max_samples: int, seed: int = 0) -> LabeledBatch:
    """Per-label proportional subsample with a fixed seed."""
    n = len(data)
    if max_samples >= n:
        return data
    rng = np.random.default_rng(seed)
    labels = data.labels.numpy()
    picked = []
    classes = np.unique(labels)
    base = max_samples // len(classes)
    for c in classes:
        idx = np.flatnonzero(labels == c)
        take = min(len(idx), base)
        picked.append(rng.choice(idx, size=take, replace=False))
    picked = np.concatenate(picked)
    short = max_samples - len(picked)
    if short > 0:
        rest = np.setdiff1d(np.arange(n), picked)
        picked = np.concatenate([picked, rng.choice(rest, size=short, replace=False)])
    return data.subset(np.sort(picked))


@dataclass
class SyntheticSpuriousSpec:
    """Planted-watermark image dataset specification.

    Each class has a fixed noisy pattern in the central (task-relevant)
    region. One grid cell outside that region carries a crisp intensity code
    that agrees with the true label at the configured correlation rate
    (``train_correlation`` on the train/test splits, ``test_correlation`` on
    the out-of-distribution split).
    """

    image_size: int = 32
    channels: int = 3
    num_classes: int = 4
    cell_size: int = 4
    watermark_cell: tuple = (0, 0)  # grid coordinates (row, col)
    train_correlation: float = 0.95
    test_correlation: float = 0.0
    noise_level: float = 0.35
    signal_blend: float = 0.5
    n_train: int = 4000
    n_test: int = 1000
    n_ood: int = 1000
    seed: int = 0

    def __post_init__(self):
        for name in ("train_correlation", "test_correlation"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigurationError(f"{name} must be in [0,1]")
        if self.image_size % self.cell_size:
            raise ConfigurationError("cell_size must divide image_size")

    @property
    def grid_shape(self):
        g = self.image_size // self.cell_size
        return (g, g)

    def to_dict(self):
        return {
            "image_size": self.image_size,
            "channels": self.channels,
            "num_classes": self.num_classes,
            "cell_size": self.cell_size,
            "watermark_cell": list(self.watermark_cell),
            "train_correlation": self.train_correlation,
            "test_correlation": self.test_correlation,
            "noise_level": self.noise_level,
            "signal_blend": self.signal_blend,
            "n_train": self.n_train,
            "n_test": self.n_test,
            "n_ood": self.n_ood,
            "seed": self.seed,
        }


@dataclass
class SyntheticDataset:
    train: LabeledBatch
    test: LabeledBatch
    ood: LabeledBatch
    relevance: np.ndarray  # per grid cell, True = task-relevant
    template: FeatureTemplate
    watermark_feature: int
    spec: SyntheticSpuriousSpec = None

    def watermark_codes(self, batch: LabeledBatch) -> np.ndarray:
        """Decode the class code carried by each image's watermark cell."""
        r0, c0 = self.spec.watermark_cell
        s = self.spec.cell_size
        cell = batch.inputs[:, :, r0 * s : (r0 + 1) * s, c0 * s : (c0 + 1) * s]
        level = cell.mean(dim=(1, 2, 3)).numpy()
        return np.rint(level * self.spec.num_classes - 1).astype(np.int64)


def generate_synthetic_spurious(spec: SyntheticSpuriousSpec) -> SyntheticDataset:
    """Build train/test/ood splits plus the task-relevance oracle."""
    rng = np.random.default_rng(spec.seed)
    size, c, k = spec.image_size, spec.channels, spec.num_classes
    gh, gw = spec.grid_shape
    # class signal fills everything but a one-cell border band; spreading it
    # over many cells keeps any single cell's influence moderate
    lo = spec.cell_size
    hi = size - spec.cell_size
    patterns = rng.random((k, c, hi - lo, hi - lo)).astype(np.float32)

    wr, wc = spec.watermark_cell
    s = spec.cell_size
    if lo <= wr * s < hi and lo <= wc * s < hi:
        raise ConfigurationError("watermark cell must sit outside the signal region")

    def _split(n, correlation):
        labels = rng.integers(0, k, size=n)
        x = rng.random((n, c, size, size)).astype(np.float32) * spec.noise_level
        noise = rng.normal(0.0, spec.noise_level, size=(n, c, hi - lo, hi - lo)).astype(np.float32)
        x[:, :, lo:hi, lo:hi] = np.clip(
            spec.signal_blend * patterns[labels] + noise, 0.0, 1.0
        )
        agree = rng.random(n) < correlation
        codes = labels.copy()
        disagree = ~agree
        if disagree.any():
            shift = rng.integers(1, k, size=int(disagree.sum()))
            codes[disagree] = (labels[disagree] + shift) % k
        level = (codes.astype(np.float32) + 1.0) / k
        x[:, :, wr * s : (wr + 1) * s, wc * s : (wc + 1) * s] = level[:, None, None, None]
        return LabeledBatch(x, labels)

    train = _split(spec.n_train, spec.train_correlation)
    test = _split(spec.n_test, spec.train_correlation)
    ood = _split(spec.n_ood, spec.test_correlation)

    relevance = np.zeros(gh * gw, dtype=bool)
    for gy in range(gh):
        for gx in range(gw):
            y0, x0 = gy * s, gx * s
            overlaps = (y0 < hi and y0 + s > lo) and (x0 < hi and x0 + s > lo)
            relevance[gy * gw + gx] = overlaps
    relevance[wr * gw + wc] = False

    return SyntheticDataset(
        train=train,
        test=test,
        ood=ood,
        relevance=relevance,
        template=FeatureTemplate("grid", grid_shape=(gh, gw)),
        watermark_feature=wr * gw + wc,
        spec=spec,
    )
