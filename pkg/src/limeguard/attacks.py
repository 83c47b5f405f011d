"""White-box attack kernels: single-step sign-gradient (FGSM), iterated
projected ascent (PGD), and a variant restricted to flagged-feature pixels.

All attacks are pure functions of (model, batch, config): no random start,
sign(0) = 0, every output stays inside the L-inf ball of radius epsilon
around the input and inside the [0, 1] value range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .errors import ConfigurationError
from .models import Classifier, LabeledBatch, input_gradient

FAMILIES = ("fgsm", "pgd", "fgsm-spurious")


@dataclass
class AttackConfig:
    family: str
    epsilon: float
    step_size: float | None = None  # pgd only
    steps: int | None = None  # pgd only
    clamp: tuple = (0.0, 1.0)
    spurious_mask: np.ndarray | None = None  # fgsm-spurious only; bool over (h, w) or (d,)

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ConfigurationError(f"unknown attack family {self.family!r}")
        if self.epsilon < 0:
            raise ConfigurationError("epsilon must be >= 0")
        if self.family == "pgd":
            if self.step_size is None or self.step_size <= 0:
                raise ConfigurationError("pgd requires step_size > 0")
            if self.steps is None or self.steps < 1:
                raise ConfigurationError("pgd requires steps >= 1")
        if self.spurious_mask is not None:
            self.spurious_mask = np.asarray(self.spurious_mask, dtype=bool)

    @property
    def tag(self) -> str:
        if self.family == "pgd":
            return f"pgd(eps={self.epsilon:g},step={self.step_size:g},n={self.steps})"
        return f"{self.family}(eps={self.epsilon:g})"

    def to_dict(self):
        return {
            "family": self.family,
            "epsilon": self.epsilon,
            "step_size": self.step_size,
            "steps": self.steps,
            "clamp": list(self.clamp),
        }

    @staticmethod
    def from_dict(obj) -> "AttackConfig":
        return AttackConfig(
            family=obj["family"],
            epsilon=obj["epsilon"],
            step_size=obj.get("step_size"),
            steps=obj.get("steps"),
            clamp=tuple(obj.get("clamp", (0.0, 1.0))),
        )


def _expand_mask(mask: np.ndarray, input_shape) -> torch.Tensor:
    """Broadcast a (h, w) or (d,) pixel mask to the full input shape."""
    if len(input_shape) == 3:
        c, h, w = input_shape
        if mask.shape != (h, w):
            raise ConfigurationError(f"mask shape {mask.shape} does not match input {input_shape}")
        return torch.as_tensor(np.broadcast_to(mask, (c, h, w)).astype(np.float32))
    if mask.shape != tuple(input_shape):
        raise ConfigurationError(f"mask shape {mask.shape} does not match input {input_shape}")
    return torch.as_tensor(mask.astype(np.float32))


def fgsm(model: Classifier, batch: LabeledBatch, cfg: AttackConfig) -> LabeledBatch:
    """x + epsilon * sign(grad of task loss), clamped to the value range."""
    if cfg.family != "fgsm":
        raise ConfigurationError(f"fgsm called with family {cfg.family!r}")
    grad = input_gradient(model, batch)
    lo, hi = cfg.clamp
    adv = (batch.inputs + cfg.epsilon * torch.sign(grad)).clamp(lo, hi)
    return LabeledBatch(adv.detach(), batch.labels)


def pgd(model: Classifier, batch: LabeledBatch, cfg: AttackConfig) -> LabeledBatch:
    """Iterated sign-gradient ascent with re-projection onto the epsilon ball.

    Starts at the unperturbed input (no random start); each of the
    ``cfg.steps`` iterations ascends by ``step_size * sign(grad)``, clips
    back into the ball around the original input, then clamps to the value
    range (both are coordinatewise boxes, so the order is immaterial; this
    order is fixed for bit-exactness).
    """
    if cfg.family != "pgd":
        raise ConfigurationError(f"pgd called with family {cfg.family!r}")
    lo, hi = cfg.clamp
    x0 = batch.inputs.detach()
    adv = x0.clone()
    for _ in range(cfg.steps):
        grad = input_gradient(model, LabeledBatch(adv, batch.labels))
        adv = adv + cfg.step_size * torch.sign(grad)
        adv = torch.min(torch.max(adv, x0 - cfg.epsilon), x0 + cfg.epsilon)
        adv = adv.clamp(lo, hi)
    return LabeledBatch(adv.detach(), batch.labels)


def fgsm_spurious(model: Classifier, batch: LabeledBatch, cfg: AttackConfig) -> LabeledBatch:
    """Sign-gradient step applied only inside the flagged-feature pixel mask."""
    if cfg.family != "fgsm-spurious":
        raise ConfigurationError(f"fgsm_spurious called with family {cfg.family!r}")
    if cfg.spurious_mask is None:
        raise ConfigurationError("fgsm-spurious requires a spurious_mask")
    if not cfg.spurious_mask.any():
        warnings.warn("empty spurious mask: returning inputs unchanged")
        return LabeledBatch(batch.inputs.detach().clone(), batch.labels)
    mask = _expand_mask(cfg.spurious_mask, tuple(batch.inputs.shape[1:]))
    grad = input_gradient(model, batch)
    lo, hi = cfg.clamp
    delta = cfg.epsilon * torch.sign(grad) * mask
    adv = torch.where(mask.bool(), (batch.inputs + delta).clamp(lo, hi), batch.inputs)
    return LabeledBatch(adv.detach(), batch.labels)


def attack(model: Classifier, batch: LabeledBatch, cfg: AttackConfig) -> LabeledBatch:
    """Dispatch on the attack family."""
    if cfg.family == "fgsm":
        return fgsm(model, batch, cfg)
    if cfg.family == "pgd":
        return pgd(model, batch, cfg)
    return fgsm_spurious(model, batch, cfg)


def save_example_grid(clean: LabeledBatch, adversarial: LabeledBatch, path, max_images: int = 16):
    """Dump a clean-vs-adversarial image grid as PNG (inspection aid)."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    n = min(max_images, len(clean))
    fig, axes = plt.subplots(2, n, figsize=(1.2 * n, 2.6), squeeze=False)
    for i in range(n):
        for row, batch in enumerate((clean, adversarial)):
            img = batch.inputs[i].numpy()
            img = np.moveaxis(img, 0, -1) if img.ndim == 3 else img[None, :]
            axes[row][i].imshow(np.squeeze(img), vmin=0, vmax=1, cmap="gray" if img.shape[-1] == 1 else None)
            axes[row][i].set_axis_off()
    axes[0][0].set_title("clean", fontsize=8, loc="left")
    axes[1][0].set_title("adversarial", fontsize=8, loc="left")
    fig.savefig(path, bbox_inches="tight", dpi=120)
    plt.close(fig)
