"""Accuracy metrics and robustness sweeps.

Every result is a :class:`MetricsRecord` whose accuracy is the exact ratio
of correct predictions; with auditing enabled the per-sample correctness
bitmap is stored alongside so any record can be recomputed. Sweeps reuse one
fixed sample order across epsilon values for paired comparisons. Records
append to a JSONL store with a column-identical CSV export.
"""

from __future__ import annotations

import csv
import json
import os
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, attack
from .errors import ConfigurationError
from .models import Classifier, LabeledBatch, forward, iter_batches

DEFAULT_EPSILONS = (0.01, 0.03, 0.1, 0.3)

_FIELDS = (
    "model_tag",
    "dataset_tag",
    "corruption_tag",
    "attack_tag",
    "epsilon",
    "accuracy",
    "n_samples",
    "n_correct",
    "seed",
    "wall_time",
    "epoch",
    "loss",
    "bitmap",
)


@dataclass
class MetricsRecord:
    model_tag: str
    dataset_tag: str
    accuracy: float
    n_samples: int
    n_correct: int
    seed: int
    wall_time: float
    corruption_tag: str | None = None
    attack_tag: str | None = None
    epsilon: float | None = None
    epoch: int | None = None
    loss: float | None = None
    bitmap: list | None = None  # per-sample correctness, only with auditing

    def to_dict(self):
        return {k: getattr(self, k) for k in _FIELDS}

    @staticmethod
    def from_dict(obj) -> "MetricsRecord":
        return MetricsRecord(**{k: obj.get(k) for k in _FIELDS})


def _correct_bitmap(model: Classifier, data: LabeledBatch, batch_size=512) -> np.ndarray:
    bits = []
    for chunk in iter_batches(data, batch_size):
        preds = forward(model, chunk).argmax(dim=1)
        bits.append((preds == chunk.labels).numpy())
    return np.concatenate(bits)


def standard_accuracy(
    model: Classifier,
    data: LabeledBatch,
    model_tag: str = "model",
    dataset_tag: str = "dataset",
    seed: int = 0,
    audit: bool = False,
) -> MetricsRecord:
    """Fraction of inputs whose top predicted class equals the label."""
    if len(data) == 0:
        raise ConfigurationError("empty dataset")
    start = time.perf_counter()
    bits = _correct_bitmap(model, data)
    n_correct = int(bits.sum())
    return MetricsRecord(
        model_tag=model_tag,
        dataset_tag=dataset_tag,
        accuracy=n_correct / len(data),
        n_samples=len(data),
        n_correct=n_correct,
        seed=seed,
        wall_time=time.perf_counter() - start,
        bitmap=bits.astype(int).tolist() if audit else None,
    )


def adversarial_accuracy(
    model: Classifier,
    data: LabeledBatch,
    cfg: AttackConfig,
    model_tag: str = "model",
    dataset_tag: str = "dataset",
    seed: int = 0,
    audit: bool = False,
    attack_batch_size: int = 512,
) -> MetricsRecord:
    """Accuracy on adversarial copies generated against this same model."""
    if len(data) == 0:
        raise ConfigurationError("empty dataset")
    start = time.perf_counter()
    bits = []
    for chunk in iter_batches(data, attack_batch_size):
        adv = attack(model, chunk, cfg)
        preds = forward(model, adv).argmax(dim=1)
        bits.append((preds == chunk.labels).numpy())
    bits = np.concatenate(bits)
    n_correct = int(bits.sum())
    return MetricsRecord(
        model_tag=model_tag,
        dataset_tag=dataset_tag,
        attack_tag=cfg.tag,
        epsilon=cfg.epsilon,
        accuracy=n_correct / len(data),
        n_samples=len(data),
        n_correct=n_correct,
        seed=seed,
        wall_time=time.perf_counter() - start,
        bitmap=bits.astype(int).tolist() if audit else None,
    )


def _family_config(family: str, epsilon: float) -> AttackConfig:
    if family == "pgd":
        # paper-style iterated configuration scaled to the budget
        return AttackConfig("pgd", epsilon, step_size=max(epsilon / 3.0, 1e-4), steps=40)
    return AttackConfig(family, epsilon)


def epsilon_sweep(
    model: Classifier,
    data: LabeledBatch,
    family: str,
    epsilons,
    model_tag: str = "model",
    dataset_tag: str = "dataset",
    seed: int = 0,
    audit: bool = False,
    make_config=None,
) -> list:
    """One record per budget, identical sample order across budgets."""
    epsilons = list(epsilons)
    if not epsilons:
        raise ConfigurationError("epsilons must be non-empty")
    if sorted(epsilons) != epsilons:
        raise ConfigurationError("epsilons must be sorted ascending")
    make_config = make_config or _family_config
    return [
        adversarial_accuracy(
            model,
            data,
            make_config(family, eps),
            model_tag=model_tag,
            dataset_tag=dataset_tag,
            seed=seed,
            audit=audit,
        )
        for eps in epsilons
    ]


def corruption_sweep(
    model: Classifier,
    corruptions: dict,
    attacks: list | None = None,
    model_tag: str = "model",
    seed: int = 0,
    audit: bool = False,
) -> list:
    """Clean accuracy per corruption, plus one record per (corruption, attack)."""
    records = []
    for tag in sorted(corruptions):
        data = corruptions[tag]
        clean = standard_accuracy(
            model, data, model_tag=model_tag, dataset_tag="corruption", seed=seed, audit=audit
        )
        clean.corruption_tag = tag
        records.append(clean)
        for cfg in attacks or ():
            rec = adversarial_accuracy(
                model, data, cfg, model_tag=model_tag, dataset_tag="corruption", seed=seed, audit=audit
            )
            rec.corruption_tag = tag
            records.append(rec)
    return records


class MetricsStore:
    """Append-only JSONL store of metrics records."""

    def __init__(self, path):
        self.path = str(path)

    def append(self, records):
        if isinstance(records, MetricsRecord):
            records = [records]
        with open(self.path, "a") as fh:
            for rec in records:
                fh.write(json.dumps(rec.to_dict()) + "\n")

    def load(self) -> list:
        if not os.path.exists(self.path):
            return []
        records = []
        with open(self.path) as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(MetricsRecord.from_dict(json.loads(line)))
        return records

    def export_csv(self, csv_path):
        """CSV mirror of the JSONL content, column for column."""
        records = self.load()
        tmp = f"{csv_path}.tmp"
        with open(tmp, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=_FIELDS)
            writer.writeheader()
            for rec in records:
                row = rec.to_dict()
                if row["bitmap"] is not None:
                    row["bitmap"] = "".join(str(b) for b in row["bitmap"])
                writer.writerow(row)
        os.replace(tmp, csv_path)


def verify_record(record: MetricsRecord) -> bool:
    """Recompute a record's accuracy from its audit bitmap."""
    if record.bitmap is None:
        warnings.warn("record has no audit bitmap")
        return True
    return (
        len(record.bitmap) == record.n_samples
        and sum(record.bitmap) == record.n_correct
        and record.accuracy == record.n_correct / record.n_samples
    )
