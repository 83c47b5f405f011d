"""Spurious feature detection: importance, sensitivity, instability.

A feature is flagged for one input when its surrogate importance, its
gradient sensitivity, or the variance of its importance across perturbation
re-draws exceeds a threshold (optionally gated by a task-relevance oracle).
Per-input flags are aggregated over a dataset into a set of consistently
flagged features, which downstream retraining masks and penalizes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigurationError
from .lime import FeatureExplanation, LimeConfig, Segmentation, explain_redraws, segment_input
from .models import Classifier, eval_scope


@dataclass
class DetectionThresholds:
    """Flagging thresholds: tau (importance), eps_sens (sensitivity),
    delta (instability). ``relevance`` optionally marks segments that ARE
    task-relevant; when present, only task-irrelevant segments can be
    flagged."""

    tau: float
    eps_sens: float
    delta: float
    relevance: np.ndarray | None = None

    def __post_init__(self):
        if min(self.tau, self.eps_sens, self.delta) < 0:
            raise ConfigurationError("thresholds must be >= 0")
        if self.relevance is not None:
            self.relevance = np.asarray(self.relevance, dtype=bool)

    def to_dict(self):
        return {"tau": self.tau, "eps_sens": self.eps_sens, "delta": self.delta}


@dataclass
class FeatureTemplate:
    """Position-aligned feature identifiers shared across a dataset.

    ``grid`` templates identify cells of a fixed grid (row-major); ``columns``
    templates identify tabular coordinates.
    """

    kind: str  # grid | columns
    grid_shape: tuple | None = None
    columns: int | None = None

    @property
    def num_features(self) -> int:
        if self.kind == "grid":
            return self.grid_shape[0] * self.grid_shape[1]
        return self.columns

    @staticmethod
    def from_segmentation(seg: Segmentation) -> "FeatureTemplate":
        if seg.mode == "grid" and seg.grid_shape is not None:
            return FeatureTemplate("grid", grid_shape=tuple(seg.grid_shape))
        if seg.mode == "columns":
            return FeatureTemplate("columns", columns=seg.num_segments)
        raise ConfigurationError(
            "dataset-level aggregation requires a fixed-grid or columns segmentation"
        )

    def matches(self, other: "FeatureTemplate") -> bool:
        return (
            self.kind == other.kind
            and self.grid_shape == other.grid_shape
            and self.columns == other.columns
        )

    def to_dict(self):
        if self.kind == "grid":
            return {"grid_h": self.grid_shape[0], "grid_w": self.grid_shape[1]}
        return {"columns": self.columns}

    @staticmethod
    def from_dict(obj) -> "FeatureTemplate":
        if "columns" in obj:
            return FeatureTemplate("columns", columns=int(obj["columns"]))
        return FeatureTemplate("grid", grid_shape=(int(obj["grid_h"]), int(obj["grid_w"])))


CRITERIA = ("importance", "sensitivity", "instability")


@dataclass
class InputFlags:
    """Flags raised for one input: feature id -> criteria that fired."""

    flags: dict
    template: FeatureTemplate


@dataclass
class FlagStats:
    importance_votes: int = 0
    sensitivity_votes: int = 0
    instability_votes: int = 0
    support_count: int = 0


@dataclass
class SpuriousFeatureSet:
    """Features consistently flagged across a dataset.

    ``flagged`` maps feature id to its vote statistics. ``pixel_mask``
    materializes the member features as a boolean pixel mask for a given
    input shape (the per-input mask generator used by masking and
    feature-restricted attacks).
    """

    template: FeatureTemplate
    flagged: dict
    rule: str
    min_support: float
    n_inputs: int
    thresholds: dict = field(default_factory=dict)
    source: str = ""

    @property
    def members(self) -> list:
        return sorted(self.flagged)

    def __len__(self):
        return len(self.flagged)

    def member_segmentation(self, input_shape) -> Segmentation:
        if self.template.kind == "columns":
            d = self.template.columns
            return Segmentation(np.arange(d), d, mode="columns")
        c, h, w = input_shape
        gh, gw = self.template.grid_shape
        if h % gh or w % gw:
            raise ConfigurationError(
                f"grid template {self.template.grid_shape} does not tile input {input_shape}"
            )
        ys = np.arange(h) // (h // gh)
        xs = np.arange(w) // (w // gw)
        seg_map = ys[:, None] * gw + xs[None, :]
        return Segmentation(seg_map, gh * gw, mode="grid", grid_shape=(gh, gw))

    def pixel_mask(self, input_shape) -> np.ndarray:
        """Boolean mask over (height, width) or (d,): True on flagged features."""
        if self.template.kind == "columns":
            mask = np.zeros(self.template.columns, dtype=bool)
            mask[self.members] = True
            return mask
        seg = self.member_segmentation(input_shape)
        return np.isin(seg.segment_map, self.members)

    def to_json(self) -> str:
        return json.dumps(
            {
                "template": self.template.to_dict(),
                "flagged": [
                    {
                        "id": int(j),
                        "votes": {
                            "importance": s.importance_votes,
                            "sensitivity": s.sensitivity_votes,
                            "instability": s.instability_votes,
                        },
                        "support": s.support_count,
                    }
                    for j, s in sorted(self.flagged.items())
                ],
                "thresholds": self.thresholds,
                "rule": self.rule,
                "min_support": self.min_support,
                "n_inputs": self.n_inputs,
                "source": self.source,
            },
            indent=2,
        )

    @staticmethod
    def from_json(text: str) -> "SpuriousFeatureSet":
        obj = json.loads(text)
        flagged = {
            int(e["id"]): FlagStats(
                importance_votes=e["votes"]["importance"],
                sensitivity_votes=e["votes"]["sensitivity"],
                instability_votes=e["votes"]["instability"],
                support_count=e["support"],
            )
            for e in obj["flagged"]
        }
        return SpuriousFeatureSet(
            template=FeatureTemplate.from_dict(obj["template"]),
            flagged=flagged,
            rule=obj["rule"],
            min_support=obj["min_support"],
            n_inputs=obj["n_inputs"],
            thresholds=obj.get("thresholds", {}),
            source=obj.get("source", ""),
        )


def empty_feature_set(template: FeatureTemplate) -> SpuriousFeatureSet:
    return SpuriousFeatureSet(template, {}, rule="any", min_support=1.0, n_inputs=0)


def feature_sensitivity(model: Classifier, x, seg: Segmentation) -> np.ndarray:
    """Mean absolute gradient of the top-class probability per segment.

    The gradient is taken with respect to the input; per segment it is
    averaged over all member elements (channels included).
    """
    xt = torch.as_tensor(
        np.asarray(x.detach().cpu() if torch.is_tensor(x) else x, dtype=np.float32)
    )
    with eval_scope(model):
        xg = xt[None].clone().requires_grad_(True)
        probs = model.probs(xg)
        c = int(probs.argmax(dim=1)[0])
        (grad,) = torch.autograd.grad(probs[0, c], xg)
    g = np.abs(grad[0].detach().cpu().numpy().astype(np.float64))
    seg_map = seg.segment_map
    if g.ndim == 3 and seg_map.ndim == 2:
        flat_ids = np.broadcast_to(seg_map, g.shape).ravel()
    else:
        flat_ids = seg_map.ravel()
    sums = np.bincount(flat_ids, weights=g.ravel(), minlength=seg.num_segments)
    counts = np.bincount(flat_ids, minlength=seg.num_segments)
    return sums / counts


def feature_instability(expls) -> np.ndarray:
    """Population variance of each surrogate coefficient across re-draws."""
    if len(expls) < 2:
        raise ConfigurationError("need at least 2 explanations")
    first = expls[0].segmentation
    for e in expls[1:]:
        if not first.same_layout(e.segmentation):
            raise ConfigurationError("explanations use different segmentations")
    betas = np.stack([e.coefficients for e in expls])
    return betas.var(axis=0)  # population convention (ddof=0)


def flag_features(
    expl: FeatureExplanation, sens: np.ndarray, instab: np.ndarray, th: DetectionThresholds
) -> InputFlags:
    """Per-input flag set: feature j is flagged when any criterion fires.

    Criteria: importance |beta_j| > tau, sensitivity > eps_sens, instability
    > delta. With a relevance oracle present only task-irrelevant features
    can be flagged. Each flag records which criteria fired.
    """
    d = expl.segmentation.num_segments
    sens = np.asarray(sens, dtype=np.float64)
    instab = np.asarray(instab, dtype=np.float64)
    if sens.shape != (d,) or instab.shape != (d,):
        raise ConfigurationError("sensitivity/instability vectors must have length d")
    imp = expl.importance
    flags = {}
    for j in range(d):
        if th.relevance is not None and th.relevance[j]:
            continue
        fired = set()
        if imp[j] > th.tau:
            fired.add("importance")
        if sens[j] > th.eps_sens:
            fired.add("sensitivity")
        if instab[j] > th.delta:
            fired.add("instability")
        if fired:
            flags[j] = fired
    return InputFlags(flags=flags, template=FeatureTemplate.from_segmentation(expl.segmentation))


def aggregate_spurious(
    per_input_flags,
    rule: str = "any",
    min_support: float = 0.3,
    thresholds: dict | None = None,
    source: str = "",
) -> SpuriousFeatureSet:
    """Collect per-input flags into the dataset-level spurious feature set.

    A feature is a member when it is flagged (under ``rule``: "any" needs one
    firing criterion per input, "majority" needs two of the three) on at
    least ``min_support`` of the inputs.
    """
    per_input_flags = list(per_input_flags)
    if not per_input_flags:
        raise ConfigurationError("no per-input flags to aggregate")
    if rule not in ("any", "majority"):
        raise ConfigurationError(f"unknown aggregation rule {rule!r}")
    template = per_input_flags[0].template
    for f in per_input_flags[1:]:
        if not template.matches(f.template):
            raise ConfigurationError("per-input flags reference different feature templates")
    n = len(per_input_flags)
    need = 2 if rule == "majority" else 1
    stats = {}
    for f in per_input_flags:
        for j, fired in f.flags.items():
            if len(fired) < need:
                continue
            s = stats.setdefault(j, FlagStats())
            s.support_count += 1
            s.importance_votes += "importance" in fired
            s.sensitivity_votes += "sensitivity" in fired
            s.instability_votes += "instability" in fired
    flagged = {
        j: s for j, s in stats.items() if s.support_count >= min_support * n - 1e-9
    }
    return SpuriousFeatureSet(
        template=template,
        flagged=flagged,
        rule=rule,
        min_support=min_support,
        n_inputs=n,
        thresholds=dict(thresholds or {}),
        source=source,
    )


def calibrate_thresholds(
    importances, sensitivities, instabilities, percentile: float = 90.0, relevance=None
) -> DetectionThresholds:
    """Percentile thresholds from pooled per-input statistics (scale-free)."""
    return DetectionThresholds(
        tau=float(np.percentile(np.asarray(importances).ravel(), percentile)),
        eps_sens=float(np.percentile(np.asarray(sensitivities).ravel(), percentile)),
        delta=float(np.percentile(np.asarray(instabilities).ravel(), percentile)),
        relevance=relevance,
    )


@dataclass
class DetectionConfig:
    lime: LimeConfig = field(default_factory=LimeConfig)
    redraws: int = 5
    percentile: float = 90.0
    rule: str = "any"
    min_support: float = 0.3
    thresholds: DetectionThresholds | None = None  # explicit; skips calibration
    relevance: np.ndarray | None = None

    def to_dict(self):
        return {
            "lime": self.lime.to_dict(),
            "redraws": self.redraws,
            "percentile": self.percentile,
            "rule": self.rule,
            "min_support": self.min_support,
            "thresholds": self.thresholds.to_dict() if self.thresholds else None,
        }


@dataclass
class DetectionResult:
    feature_set: SpuriousFeatureSet
    thresholds: DetectionThresholds
    per_input_flags: list
    importances: np.ndarray
    sensitivities: np.ndarray
    instabilities: np.ndarray


def detect_spurious(model: Classifier, inputs, config: DetectionConfig, source: str = "") -> DetectionResult:
    """End-to-end dataset detection.

    For each input: one canonical explanation plus re-draws for instability,
    and the gradient sensitivity vector. Thresholds default to pooled
    percentiles over these statistics, then per-input flags are aggregated.
    """
    xs = np.asarray(
        inputs.inputs.numpy() if hasattr(inputs, "inputs") else inputs, dtype=np.float32
    )
    if xs.ndim not in (2, 4):
        raise ConfigurationError("inputs must be (n, channels, height, width) or (n, d)")
    n = xs.shape[0]
    seg = segment_input(xs[0], config.lime)
    expls, sens_rows, instab_rows = [], [], []
    for i in range(n):
        redraws = explain_redraws(
            model, xs[i], config.lime, config.redraws, seed=config.lime.seed + i * config.redraws
        )
        expls.append(redraws[0])
        instab_rows.append(feature_instability(redraws))
        sens_rows.append(feature_sensitivity(model, xs[i], seg))
    importances = np.stack([e.importance for e in expls])
    sensitivities = np.stack(sens_rows)
    instabilities = np.stack(instab_rows)
    th = config.thresholds
    if th is None:
        th = calibrate_thresholds(
            importances, sensitivities, instabilities, config.percentile, relevance=config.relevance
        )
    elif config.relevance is not None and th.relevance is None:
        th = replace(th, relevance=config.relevance)
    flags = [
        flag_features(expls[i], sensitivities[i], instabilities[i], th) for i in range(n)
    ]
    fset = aggregate_spurious(
        flags, rule=config.rule, min_support=config.min_support, thresholds=th.to_dict(), source=source
    )
    return DetectionResult(fset, th, flags, importances, sensitivities, instabilities)
