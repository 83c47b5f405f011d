"""Local surrogate explanations over interpretable feature groups.

An input is decomposed into segments (grid cells, superpixels, or raw
columns for tabular data). Perturbed copies are created by switching
segments off to a baseline, the model is queried on each copy, copies are
weighted by an exponential proximity kernel, and a weighted-ridge linear
model over the binary segment masks is fit. A feature's importance is the
absolute value of its surrogate coefficient.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .errors import ConfigurationError, ExplanationError, NumericalError
from .models import Classifier, eval_scope

DEFAULT_SIGMA_SCALE = 0.25  # sigma = scale * sqrt(number of input elements)


@dataclass
class LimeConfig:
    num_samples: int = 1000
    sigma: float | None = None  # None: DEFAULT_SIGMA_SCALE * sqrt(n_elements)
    ridge: float = 1e-4
    baseline: str = "zero"  # zero | mean-fill
    segmentation: str = "grid"  # grid | slic | columns
    cell_size: int = 4  # pixels per grid-cell side
    slic_segments: int = 64
    d_min: int = 2
    d_max: int = 4096
    mask_prob: float = 0.5  # Bernoulli keep probability per segment
    seed: int = 0

    def __post_init__(self):
        if self.baseline not in ("zero", "mean-fill"):
            raise ConfigurationError(f"unknown baseline policy {self.baseline!r}")
        if self.segmentation not in ("grid", "slic", "columns"):
            raise ConfigurationError(f"unknown segmentation mode {self.segmentation!r}")
        if self.sigma is not None and self.sigma <= 0:
            raise ConfigurationError("sigma must be positive")
        if not 0 < self.mask_prob < 1:
            raise ConfigurationError("mask_prob must be in (0,1)")

    def to_dict(self):
        return {
            "num_samples": self.num_samples,
            "sigma": self.sigma,
            "ridge": self.ridge,
            "baseline": self.baseline,
            "segmentation": self.segmentation,
            "cell_size": self.cell_size,
            "slic_segments": self.slic_segments,
            "d_min": self.d_min,
            "d_max": self.d_max,
            "mask_prob": self.mask_prob,
            "seed": self.seed,
        }


@dataclass
class Segmentation:
    """Assignment of every pixel (or column) to one of d segments.

    ``segment_map`` has shape (height, width) for images, applying to all
    channels, or (d,) for tabular inputs. Ids are contiguous from 0 and every
    id occurs at least once. ``grid_shape`` is set only for grid-template
    segmentations (cells_y, cells_x), which is what dataset-level
    aggregation requires.
    """

    segment_map: np.ndarray
    num_segments: int
    mode: str = "grid"
    grid_shape: tuple | None = None

    def __post_init__(self):
        self.segment_map = np.asarray(self.segment_map, dtype=np.int64)
        ids = np.unique(self.segment_map)
        if ids.min() != 0 or ids.max() != self.num_segments - 1 or len(ids) != self.num_segments:
            raise ConfigurationError("segment ids must be contiguous from 0 and all present")

    def member_mask(self, segment_id: int) -> np.ndarray:
        """Boolean mask over the segment map's positions."""
        return self.segment_map == segment_id

    def pixel_counts(self) -> np.ndarray:
        return np.bincount(self.segment_map.ravel(), minlength=self.num_segments)

    def same_layout(self, other: "Segmentation") -> bool:
        return (
            self.num_segments == other.num_segments
            and self.segment_map.shape == other.segment_map.shape
            and np.array_equal(self.segment_map, other.segment_map)
        )


def _grid_segmentation(height, width, cell_size):
    cells_y = -(-height // cell_size)
    cells_x = -(-width // cell_size)
    ys = np.arange(height) // cell_size
    xs = np.arange(width) // cell_size
    seg = (ys[:, None] * cells_x + xs[None, :]).astype(np.int64)
    return Segmentation(seg, cells_y * cells_x, mode="grid", grid_shape=(cells_y, cells_x))


def segment_input(image, config: LimeConfig) -> Segmentation:
    """Decompose an input into interpretable segments.

    Modes: ``grid`` (fixed cells of ``cell_size`` pixels, template-aligned
    across a dataset), ``slic`` (superpixels; falls back to the grid on
    degenerate/constant images or when too few segments come back), and
    ``columns`` (each tabular coordinate is its own feature). Deterministic
    for a fixed config.
    """
    x = np.asarray(image.detach().cpu() if torch.is_tensor(image) else image, dtype=np.float64)
    if config.segmentation == "columns" or x.ndim == 1:
        d = x.shape[-1] if x.ndim else 1
        return Segmentation(np.arange(d, dtype=np.int64), d, mode="columns")
    if x.ndim != 3:
        raise ConfigurationError(f"expected (channels, height, width) or (d,), got shape {x.shape}")
    _, h, w = x.shape
    if config.segmentation == "grid":
        return _grid_segmentation(h, w, config.cell_size)

    # slic superpixels; constant images give a single segment, so fall back
    if np.ptp(x) < 1e-12:
        return _grid_segmentation(h, w, config.cell_size)
    from skimage.segmentation import slic

    n_req = int(np.clip(config.slic_segments, config.d_min, config.d_max))
    labels = slic(
        np.moveaxis(x, 0, -1),
        n_segments=n_req,
        compactness=10.0,
        start_label=0,
        channel_axis=-1,
        enforce_connectivity=True,
    )
    _, labels = np.unique(labels, return_inverse=True)
    labels = labels.reshape(h, w)
    d = int(labels.max()) + 1
    if d < config.d_min:
        return _grid_segmentation(h, w, config.cell_size)
    return Segmentation(labels, d, mode="slic")


def kernel_weight(x, z, sigma: float) -> float:
    """Proximity weight exp(-||x - z||_2^2 / sigma^2) in raw input space."""
    if sigma <= 0:
        raise ConfigurationError("sigma must be positive")
    xa = np.asarray(x, dtype=np.float64)
    za = np.asarray(z, dtype=np.float64)
    if xa.shape != za.shape:
        raise ConfigurationError(f"shape mismatch {xa.shape} vs {za.shape}")
    sq = float(np.sum((xa - za) ** 2))
    return float(np.exp(-sq / (sigma * sigma)))


def resolve_sigma(x: np.ndarray, config: LimeConfig) -> float:
    if config.sigma is not None:
        return float(config.sigma)
    return DEFAULT_SIGMA_SCALE * float(np.sqrt(x.size))


@dataclass
class PerturbationSet:
    """Masked copies of one input with model outputs and proximity weights.

    Row 0 of ``masks`` is always all-ones (the unperturbed input).
    ``outputs[i]`` is the model's probability for ``explained_class`` on the
    i-th copy; ``weights[i]`` its kernel weight. Reproducible from ``seed``.
    """

    masks: np.ndarray
    outputs: np.ndarray
    weights: np.ndarray
    base_input: np.ndarray
    segmentation: Segmentation
    explained_class: int
    seed: int
    sigma: float
    baseline: str


def _reconstruct(base, baseline_values, seg_map, masks):
    """Vectorized z_i = mask-kept parts of x plus baseline elsewhere."""
    keep = masks[:, seg_map]  # (N, H, W) or (N, d)
    if base.ndim == 3:
        keep = keep[:, None, :, :]
    return keep * base[None] + (1.0 - keep) * baseline_values[None]


def sample_perturbations(
    x,
    seg: Segmentation,
    model: Classifier,
    n_samples: int,
    seed: int,
    baseline: str = "zero",
    sigma: float | None = None,
    batch_size: int = 256,
    mask_prob: float = 0.5,
) -> PerturbationSet:
    """Draw Bernoulli segment masks and record model outputs and weights.

    Masked-off segments are replaced by the baseline (zeros or the input's
    per-channel mean). The recorded output is the probability of the model's
    top class on the unperturbed input. Entry 0 is the all-ones mask.
    """
    base = np.asarray(x.detach().cpu() if torch.is_tensor(x) else x, dtype=np.float32)
    d = seg.num_segments
    if n_samples < d + 2:
        raise ConfigurationError(f"need at least d+2={d + 2} samples, got {n_samples}")
    if baseline == "zero":
        baseline_values = np.zeros_like(base)
    elif baseline == "mean-fill":
        if base.ndim == 3:
            baseline_values = np.broadcast_to(
                base.mean(axis=(1, 2), keepdims=True), base.shape
            ).astype(np.float32)
        else:
            baseline_values = np.full_like(base, base.mean())
    else:
        raise ConfigurationError(f"unknown baseline policy {baseline!r}")

    rng = np.random.default_rng(seed)
    masks = (rng.random((n_samples, d)) < mask_prob).astype(np.float32)
    masks[0] = 1.0

    if sigma is None:
        sigma = DEFAULT_SIGMA_SCALE * float(np.sqrt(base.size))

    outputs = np.empty(n_samples, dtype=np.float64)
    weights = np.empty(n_samples, dtype=np.float64)
    base64 = base.astype(np.float64)
    with eval_scope(model), torch.no_grad():
        p0 = model.probs(torch.as_tensor(base[None]))
        explained_class = int(p0.argmax(dim=1)[0])
        for start in range(0, n_samples, batch_size):
            chunk = masks[start : start + batch_size]
            z = _reconstruct(base, baseline_values, seg.segment_map, chunk)
            probs = model.probs(torch.as_tensor(z, dtype=torch.float32))
            probs = probs.detach().cpu().numpy()
            if not np.isfinite(probs).all():
                bad = start + int(np.argwhere(~np.isfinite(probs).all(axis=1))[0][0])
                raise NumericalError(f"model produced non-finite output on perturbed sample {bad}")
            outputs[start : start + len(chunk)] = probs[:, explained_class]
            diffs = (z.astype(np.float64) - base64[None]).reshape(len(chunk), -1)
            weights[start : start + len(chunk)] = np.exp(-np.sum(diffs**2, axis=1) / (sigma * sigma))

    return PerturbationSet(
        masks=masks,
        outputs=outputs,
        weights=weights,
        base_input=base,
        segmentation=seg,
        explained_class=explained_class,
        seed=seed,
        sigma=float(sigma),
        baseline=baseline,
    )


@dataclass
class FeatureExplanation:
    """Weighted-ridge linear surrogate fit over segment masks.

    ``coefficients[j]`` is the surrogate weight of segment j; its magnitude
    is the feature's importance score. ``surrogate_loss`` is the achieved
    weighted squared residual (ridge term excluded).
    """

    intercept: float
    coefficients: np.ndarray
    segmentation: Segmentation
    explained_class: int
    surrogate_loss: float
    config: dict = field(default_factory=dict)

    @property
    def importance(self) -> np.ndarray:
        return np.abs(self.coefficients)

    def to_json(self) -> str:
        seg = self.segmentation
        return json.dumps(
            {
                "segments": {
                    "shape": list(seg.segment_map.shape),
                    "rle": _rle_encode(seg.segment_map.ravel()),
                    "num_segments": seg.num_segments,
                    "mode": seg.mode,
                    "grid_shape": list(seg.grid_shape) if seg.grid_shape else None,
                },
                "beta0": self.intercept,
                "beta": self.coefficients.tolist(),
                "explained_class": self.explained_class,
                "surrogate_loss": self.surrogate_loss,
                "seed": self.config.get("seed"),
                "config": self.config,
            }
        )

    @staticmethod
    def from_json(text: str) -> "FeatureExplanation":
        obj = json.loads(text)
        seg_info = obj["segments"]
        seg_map = _rle_decode(seg_info["rle"]).reshape(seg_info["shape"])
        seg = Segmentation(
            seg_map,
            seg_info["num_segments"],
            mode=seg_info.get("mode", "grid"),
            grid_shape=tuple(seg_info["grid_shape"]) if seg_info.get("grid_shape") else None,
        )
        return FeatureExplanation(
            intercept=obj["beta0"],
            coefficients=np.asarray(obj["beta"], dtype=np.float64),
            segmentation=seg,
            explained_class=obj["explained_class"],
            surrogate_loss=obj["surrogate_loss"],
            config=obj.get("config", {}),
        )


def _rle_encode(flat):
    runs = []
    prev = None
    count = 0
    for v in flat.tolist():
        if v == prev:
            count += 1
        else:
            if prev is not None:
                runs.append([prev, count])
            prev, count = v, 1
    if prev is not None:
        runs.append([prev, count])
    return runs


def _rle_decode(runs):
    return np.concatenate([np.full(n, v, dtype=np.int64) for v, n in runs]) if runs else np.empty(0, np.int64)


def fit_surrogate(pset: PerturbationSet, ridge: float = 0.0) -> FeatureExplanation:
    """Minimize sum_i w_i (f(z_i) - b0 - beta . z_i)^2 + ridge * ||beta||^2.

    Solved through a least-squares factorization of the sqrt-weighted design
    (the intercept is not penalized). A singular system with ridge = 0 is
    retried once with ridge = 1e-6 and flagged in the config snapshot.
    """
    n, d = pset.masks.shape
    if n < d + 2:
        raise ConfigurationError(f"need at least d+2={d + 2} samples, got {n}")
    if np.any(pset.weights <= 0):
        raise ConfigurationError("kernel weights must be positive")

    sw = np.sqrt(pset.weights)
    design = np.concatenate([np.ones((n, 1)), pset.masks.astype(np.float64)], axis=1)
    a = design * sw[:, None]
    b = pset.outputs * sw

    ridge_fallback = False
    if ridge == 0.0 and np.linalg.matrix_rank(a) < d + 1:
        ridge = 1e-6
        ridge_fallback = True
    if ridge > 0.0:
        reg = np.zeros((d, d + 1))
        reg[:, 1:] = np.sqrt(ridge) * np.eye(d)
        a = np.concatenate([a, reg], axis=0)
        b = np.concatenate([b, np.zeros(d)])

    coef, _, _, _ = np.linalg.lstsq(a, b, rcond=None)
    if not np.isfinite(coef).all():
        raise NumericalError("surrogate solve produced non-finite coefficients")
    intercept, beta = float(coef[0]), coef[1:]
    residual = pset.outputs - (intercept + pset.masks @ beta)
    surrogate_loss = float(np.sum(pset.weights * residual**2))
    return FeatureExplanation(
        intercept=intercept,
        coefficients=beta,
        segmentation=pset.segmentation,
        explained_class=pset.explained_class,
        surrogate_loss=surrogate_loss,
        config={
            "seed": pset.seed,
            "ridge": ridge,
            "ridge_fallback": ridge_fallback,
            "sigma": pset.sigma,
            "num_samples": n,
            "baseline": pset.baseline,
        },
    )


def explain(model: Classifier, x, config: LimeConfig | None = None) -> FeatureExplanation:
    """Segment, perturb, weight, and fit: the full explanation pipeline.

    Deterministic given ``config.seed``. Component failures are re-raised as
    :class:`ExplanationError` labeled with the failing stage.
    """
    if config is None:
        config = LimeConfig()
    try:
        seg = segment_input(x, config)
    except Exception as exc:
        raise ExplanationError("segment", exc) from exc
    try:
        base = np.asarray(x.detach().cpu() if torch.is_tensor(x) else x, dtype=np.float32)
        pset = sample_perturbations(
            x,
            seg,
            model,
            config.num_samples,
            config.seed,
            baseline=config.baseline,
            sigma=resolve_sigma(base, config),
            mask_prob=config.mask_prob,
        )
    except Exception as exc:
        raise ExplanationError("sample", exc) from exc
    try:
        expl = fit_surrogate(pset, config.ridge)
    except Exception as exc:
        raise ExplanationError("fit", exc) from exc
    # requested config first, then achieved values (resolved sigma, fallback ridge)
    achieved = dict(expl.config)
    expl.config = config.to_dict()
    expl.config.update(achieved)
    return expl


def explain_redraws(
    model: Classifier, x, config: LimeConfig, redraws: int, seed: int | None = None
) -> list[FeatureExplanation]:
    """Re-run the explanation with fresh perturbation draws, one segmentation.

    Used for coefficient-stability analysis; returns ``redraws``
    explanations sharing the identical segmentation.
    """
    if redraws < 1:
        raise ConfigurationError("redraws must be >= 1")
    base_seed = config.seed if seed is None else seed
    out = []
    for r in range(redraws):
        cfg = replace(config, seed=base_seed + r)
        out.append(explain(model, x, cfg))
    return out


def importance_heatmap(expl: FeatureExplanation) -> np.ndarray:
    """Per-pixel map carrying each segment's importance |beta_j|."""
    return expl.importance[expl.segmentation.segment_map]


def save_heatmap_png(expl: FeatureExplanation, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    heat = importance_heatmap(expl)
    if heat.ndim == 1:
        heat = heat[None, :]
    fig, ax = plt.subplots(figsize=(4, 4))
    im = ax.imshow(heat, cmap="viridis")
    fig.colorbar(im, ax=ax, fraction=0.046)
    ax.set_axis_off()
    fig.savefig(path, bbox_inches="tight", dpi=150)
    plt.close(fig)
