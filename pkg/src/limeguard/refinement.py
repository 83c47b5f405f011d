"""Explanation-guided retraining: masking, gradient penalties, and the
iterative detect-retrain loop.

The training objective combines the task loss, an adversarial term computed
on attacked copies of the batch, and a penalty on the model's gradient over
flagged features. The outer loop alternates detection (re-explaining a
validation sample) with retraining, keeping the model that scores best on a
fixed probe attack.
"""

from __future__ import annotations

import copy
import json
import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .attacks import AttackConfig, attack
from .detection import DetectionConfig, SpuriousFeatureSet, detect_spurious
from .errors import CapabilityError, ConfigurationError, DivergenceError
from .models import (
    Classifier,
    LabeledBatch,
    OptimizerConfig,
    eval_scope,
    forward,
    iter_batches,
    task_loss,
    train_epochs,
)

MASK_POLICIES = ("off", "zero-fill", "mean-fill")


@dataclass
class RefinementConfig:
    lam: float = 1.0  # weight of the gradient penalty over flagged features
    alpha_adv: float = 1.0  # weight of the adversarial loss term
    masking: str = "zero-fill"
    mask_probability: float = 0.5  # fraction of training batches masked
    attack_for_training: AttackConfig = field(default_factory=lambda: AttackConfig("fgsm", 0.03))
    detection: DetectionConfig = field(default_factory=DetectionConfig)
    outer_iterations: int = 3
    probe_attack: AttackConfig = field(default_factory=lambda: AttackConfig("fgsm", 0.01))
    min_gain_points: float = 0.25  # stop when probe gains fall below this (percentage points)
    patience: int = 1
    retrain_epochs: int = 5
    initial_epochs: int = 0  # > 0: plain pre-training before the loop
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    detection_sample: int = 200
    reg_form: str = "squared"  # squared | abs
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0 or self.alpha_adv < 0:
            raise ConfigurationError("lam and alpha_adv must be >= 0")
        if self.outer_iterations < 1:
            raise ConfigurationError("outer_iterations must be >= 1")
        if self.masking not in MASK_POLICIES:
            raise ConfigurationError(f"unknown masking policy {self.masking!r}")
        if self.reg_form not in ("squared", "abs"):
            raise ConfigurationError(f"unknown reg_form {self.reg_form!r}")
        if not 0 <= self.mask_probability <= 1:
            raise ConfigurationError("mask_probability must be in [0,1]")

    def to_dict(self):
        return {
            "lambda": self.lam,
            "alpha_adv": self.alpha_adv,
            "masking": self.masking,
            "mask_probability": self.mask_probability,
            "attack_for_training": self.attack_for_training.to_dict(),
            "detection": self.detection.to_dict(),
            "outer_iterations": self.outer_iterations,
            "probe_attack": self.probe_attack.to_dict(),
            "min_gain_points": self.min_gain_points,
            "patience": self.patience,
            "retrain_epochs": self.retrain_epochs,
            "initial_epochs": self.initial_epochs,
            "optimizer": self.optimizer.to_dict(),
            "detection_sample": self.detection_sample,
            "reg_form": self.reg_form,
            "seed": self.seed,
        }


_second_order_checked = False


def ensure_second_order_support():
    """Fail fast if the backend cannot differentiate through input gradients."""
    global _second_order_checked
    if _second_order_checked:
        return
    try:
        w = torch.tensor([2.0, -1.0], requires_grad=True)
        x = torch.tensor([1.0, 3.0], requires_grad=True)
        y = (w * x * x).sum()
        (gx,) = torch.autograd.grad(y, x, create_graph=True)
        (gw,) = torch.autograd.grad(gx.sum(), w)
        assert torch.isfinite(gw).all()
    except Exception as exc:  # pragma: no cover - depends on backend build
        raise CapabilityError(f"backend lacks second-order differentiation: {exc}") from exc
    _second_order_checked = True


def apply_mask(x, fset: SpuriousFeatureSet, policy: str, fill_values=None):
    """Replace flagged-feature pixels by zero or by per-channel fill values.

    All other pixels are returned bitwise unchanged; the operation is
    idempotent. ``fill_values`` (length channels, or length d for tabular)
    is required for mean-fill and should hold the training means.
    """
    if policy not in ("zero-fill", "mean-fill"):
        raise ConfigurationError(f"apply_mask needs zero-fill or mean-fill, got {policy!r}")
    was_numpy = not torch.is_tensor(x)
    xt = torch.as_tensor(np.asarray(x, dtype=np.float32)) if was_numpy else x
    if len(fset) == 0:
        out = xt.clone()
        return out.numpy() if was_numpy else out

    if policy == "mean-fill" and fill_values is None:
        raise ConfigurationError("mean-fill requires fill_values (per-channel training means)")
    fv = None if fill_values is None else torch.as_tensor(np.asarray(fill_values, dtype=np.float32))

    if fset.template.kind == "grid":
        if xt.ndim not in (3, 4):
            raise ConfigurationError(f"grid template cannot mask input of shape {tuple(xt.shape)}")
        shape = tuple(xt.shape[-3:])
        mask = torch.as_tensor(np.broadcast_to(fset.pixel_mask(shape), shape).copy())
        fill = torch.zeros((), dtype=xt.dtype) if policy == "zero-fill" else fv.reshape(-1, 1, 1)
    else:
        d = fset.template.columns
        if xt.ndim not in (1, 2) or xt.shape[-1] != d:
            raise ConfigurationError(f"columns template cannot mask input of shape {tuple(xt.shape)}")
        mask = torch.as_tensor(fset.pixel_mask((d,)))
        fill = torch.zeros((), dtype=xt.dtype) if policy == "zero-fill" else fv
    out = torch.where(mask, fill.to(xt.dtype), xt)
    return out.numpy() if was_numpy else out


def _per_feature_grad_sq(model, batch: LabeledBatch, fset: SpuriousFeatureSet, create_graph: bool):
    """Squared gradient mass of the top-class probability per flagged feature.

    Returns a (n, |flagged|) tensor where entry (i, j) is the squared L2 norm
    of d p_c(x_i) / d x_i restricted to feature j's elements (c is the
    argmax class of sample i, held fixed).
    """
    x = batch.inputs.detach().clone().requires_grad_(True)
    probs = model.probs(x)
    with torch.no_grad():
        c = probs.argmax(dim=1)
    picked = probs[torch.arange(probs.shape[0]), c].sum()
    (grad,) = torch.autograd.grad(picked, x, create_graph=create_graph)
    n = x.shape[0]
    if x.ndim == 4:
        if fset.template.kind != "grid":
            raise ConfigurationError("columns template cannot score image inputs")
        seg = fset.member_segmentation(tuple(x.shape[1:]))
        g2 = (grad**2).sum(dim=1).reshape(n, -1)
        ids = torch.as_tensor(seg.segment_map.ravel())
    else:
        if fset.template.kind != "columns":
            raise ConfigurationError("grid template needs image inputs")
        g2 = grad**2
        ids = torch.arange(fset.template.columns)
    per_segment = torch.zeros(n, fset.template.num_features, dtype=g2.dtype).index_add_(1, ids, g2)
    members = torch.as_tensor(fset.members, dtype=torch.int64)
    return per_segment[:, members]


def sensitivity_reg_loss(
    model: Classifier, batch: LabeledBatch, fset: SpuriousFeatureSet, squared: bool = True
) -> torch.Tensor:
    """Gradient penalty over flagged features, differentiable in parameters.

    Squared form: mean over the batch and over flagged features of the
    squared L2 norm of the top-class probability gradient restricted to each
    feature. With ``squared=False`` the norms are left unsquared and summed
    over features (batch-averaged), matching the Lagrangian variant.
    An empty feature set yields 0 (with a warning).
    """
    if len(fset) == 0:
        warnings.warn("sensitivity penalty over an empty feature set is 0")
        return torch.zeros(())
    r = _per_feature_grad_sq(model, batch, fset, create_graph=True)
    if squared:
        return r.mean()
    return torch.sqrt(r.clamp_min(0)).mean(dim=0).sum()


def combined_loss(model, batch: LabeledBatch, cfg: RefinementConfig, fset: SpuriousFeatureSet):
    """task + alpha_adv * adversarial + lam * gradient penalty.

    Terms with zero weight are skipped entirely, so with alpha_adv = lam = 0
    the returned tensor is exactly the task loss. The adversarial term is the
    task loss on attacked copies of the same batch (attack generation does
    not contribute parameter gradients). Returns (total, per-term breakdown).
    """
    total = task_loss(model, batch)
    breakdown = {"task": float(total.detach()), "adv": 0.0, "reg": 0.0}
    if cfg.alpha_adv > 0:
        adv_batch = attack(model, batch, cfg.attack_for_training)
        l_adv = task_loss(model, adv_batch)
        total = total + cfg.alpha_adv * l_adv
        breakdown["adv"] = float(l_adv.detach())
    if cfg.lam > 0 and len(fset) > 0:
        l_reg = sensitivity_reg_loss(model, batch, fset, squared=(cfg.reg_form == "squared"))
        total = total + cfg.lam * l_reg
        breakdown["reg"] = float(l_reg.detach())
    breakdown["total"] = float(total.detach())
    return total, breakdown


def augmented_loss(model, batch: LabeledBatch, fset: SpuriousFeatureSet, lam: float) -> torch.Tensor:
    """Lagrangian form: task loss plus lam * sum of unsquared per-feature
    gradient norms (batch-averaged per feature). With lam = 0 this is exactly
    the task loss."""
    total = task_loss(model, batch)
    if lam > 0 and len(fset) > 0:
        r = _per_feature_grad_sq(model, batch, fset, create_graph=True)
        total = total + lam * torch.sqrt(r.clamp_min(0)).mean(dim=0).sum()
    return total


def spurious_gradient_norm(model, batch: LabeledBatch, fset: SpuriousFeatureSet) -> float:
    """Diagnostic: mean over batch and flagged features of the gradient norm."""
    if len(fset) == 0:
        return 0.0
    with eval_scope(model):
        r = _per_feature_grad_sq(model, batch, fset, create_graph=False)
    return float(torch.sqrt(r.clamp_min(0)).mean())


@dataclass
class IterationRecord:
    iteration: int
    flagged_features: list
    template: dict
    clean_accuracy: float
    probe_accuracy: float
    probe_attack: str
    spurious_gradient_norm: float
    diverged: bool = False

    def to_dict(self):
        return {
            "iteration": self.iteration,
            "flagged_features": self.flagged_features,
            "template": self.template,
            "clean_accuracy": self.clean_accuracy,
            "probe_accuracy": self.probe_accuracy,
            "probe_attack": self.probe_attack,
            "spurious_gradient_norm": self.spurious_gradient_norm,
            "diverged": self.diverged,
        }


@dataclass
class RefinementTrace:
    records: list = field(default_factory=list)

    def save_jsonl(self, path):
        import os

        tmp = f"{path}.tmp"
        with open(tmp, "w") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict()) + "\n")
        os.replace(tmp, path)

    @staticmethod
    def load_jsonl(path) -> "RefinementTrace":
        records = []
        with open(path) as fh:
            for line in fh:
                obj = json.loads(line)
                records.append(IterationRecord(**obj))
        return RefinementTrace(records)


def _accuracy(model, data: LabeledBatch, batch_size=512) -> float:
    correct = 0
    for chunk in iter_batches(data, batch_size):
        correct += int((forward(model, chunk).argmax(dim=1) == chunk.labels).sum())
    return correct / len(data)


def _snapshot(model):
    return copy.deepcopy(model.net.state_dict()) if hasattr(model, "net") else None


def _restore(model, state):
    if state is not None:
        model.net.load_state_dict(copy.deepcopy(state))


def make_refinement_loss(cfg: RefinementConfig, fset: SpuriousFeatureSet, fill_values, rng):
    """Batch loss used during retraining: optional input masking (applied to
    a seeded fraction of batches) followed by the combined objective."""

    def loss_fn(model, batch):
        b = batch
        if cfg.masking != "off" and len(fset) > 0 and rng.random() < cfg.mask_probability:
            masked = apply_mask(
                b.inputs, fset, cfg.masking, fill_values if cfg.masking == "mean-fill" else None
            )
            b = LabeledBatch(masked, b.labels)
        total, _ = combined_loss(model, b, cfg, fset)
        return total

    return loss_fn


def refine(model: Classifier, train_data: LabeledBatch, val_data: LabeledBatch, cfg: RefinementConfig):
    """Iteratively detect flagged features and retrain against them.

    Each outer iteration: (a) explain a seeded sample of validation inputs,
    (b) aggregate flags into the current spurious feature set, (c) retrain
    with the combined objective and input masking, (d) record accuracy,
    probe-attack accuracy, and the flagged-feature gradient norm. Training
    divergence rolls the iteration back and is recorded. Stops early once
    probe gains stay below ``min_gain_points`` for ``patience`` iterations;
    the returned model is the best one by probe accuracy.
    """
    if cfg.lam > 0:
        ensure_second_order_support()
    if cfg.initial_epochs > 0:
        train_epochs(model, train_data, task_loss, cfg.optimizer, cfg.initial_epochs, seed=cfg.seed)

    if train_data.inputs.ndim == 4:
        fill_values = train_data.inputs.mean(dim=(0, 2, 3)).numpy()
    else:
        fill_values = train_data.inputs.mean(dim=0).numpy()

    trace = RefinementTrace()
    rng = np.random.default_rng(cfg.seed)
    best_state, best_probe = _snapshot(model), -1.0
    prev_probe, stall = None, 0
    for it in range(cfg.outer_iterations):
        k = min(cfg.detection_sample, len(val_data))
        det_idx = rng.choice(len(val_data), size=k, replace=False)
        detection = detect_spurious(
            model, val_data.subset(det_idx), cfg.detection, source=f"iteration-{it}"
        )
        fset = detection.feature_set

        pre_state = _snapshot(model)
        mask_rng = np.random.default_rng(cfg.seed + 1000 + it)
        diverged = False
        try:
            train_epochs(
                model,
                train_data,
                make_refinement_loss(cfg, fset, fill_values, mask_rng),
                cfg.optimizer,
                cfg.retrain_epochs,
                seed=cfg.seed + 1 + it,
            )
        except DivergenceError:
            _restore(model, pre_state)
            diverged = True

        clean_acc = _accuracy(model, val_data)
        probe_batch = attack(model, val_data, cfg.probe_attack)
        probe_acc = _accuracy(model, probe_batch)
        norm_sample = val_data.subset(np.arange(min(256, len(val_data))))
        trace.records.append(
            IterationRecord(
                iteration=it,
                flagged_features=fset.members,
                template=fset.template.to_dict(),
                clean_accuracy=clean_acc,
                probe_accuracy=probe_acc,
                probe_attack=cfg.probe_attack.tag,
                spurious_gradient_norm=spurious_gradient_norm(model, norm_sample, fset),
                diverged=diverged,
            )
        )
        if probe_acc > best_probe:
            best_probe, best_state = probe_acc, _snapshot(model)
        if prev_probe is not None:
            gain_points = (probe_acc - prev_probe) * 100.0
            stall = stall + 1 if gain_points < cfg.min_gain_points else 0
            if stall >= cfg.patience:
                prev_probe = probe_acc
                break
        prev_probe = probe_acc

    _restore(model, best_state)
    model.eval_mode()
    return model, trace
