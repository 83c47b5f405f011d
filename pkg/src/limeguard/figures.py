"""Figure emission from the metrics store.

Figures are renderings of stored records, never recomputations: every PNG
gets a JSON sidecar holding exactly the plotted series. Missing series are
skipped with a warning.
"""

from __future__ import annotations

import json
import os
import warnings

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluation import MetricsStore


def _attack_family(record):
    return record.attack_tag.split("(")[0] if record.attack_tag else None


def _series_label(model_tag, dataset_tag, dataset_tags):
    return model_tag if len(dataset_tags) <= 1 else f"{model_tag}/{dataset_tag}"


def _write_sidecar(path, name, series):
    payload = {"figure": name, "series": series}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, indent=2)
    os.replace(tmp, path)


def _epoch_curves(records, value_attr):
    curves = {}
    for rec in records:
        if rec.epoch is None:
            continue
        value = getattr(rec, value_attr)
        if value is None:
            continue
        curves.setdefault(rec.model_tag, []).append((rec.epoch, value))
    return {
        tag: sorted(points) for tag, points in curves.items() if points
    }


def _plot_lines(series, title, xlabel, ylabel, png_path):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for entry in series:
        ax.plot(entry["x"], entry["y"], marker="o", label=entry["label"])
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend()
    fig.savefig(png_path, bbox_inches="tight", dpi=150)
    plt.close(fig)


def emit_figures(store: MetricsStore, out_dir) -> list:
    """Emit curve, sweep, and corruption-bar figures with data sidecars."""
    records = store.load() if hasattr(store, "load") else list(store)
    if not records:
        raise ValueError("metrics store is empty")
    os.makedirs(out_dir, exist_ok=True)
    emitted = []

    # accuracy / loss over training epochs
    for value_attr, name, ylabel in (
        ("accuracy", "accuracy_over_epochs", "accuracy"),
        ("loss", "loss_over_epochs", "loss"),
    ):
        curves = _epoch_curves(records, value_attr)
        if not curves:
            warnings.warn(f"no epoch series for {name}; skipping")
            continue
        series = [
            {"label": tag, "x": [p[0] for p in pts], "y": [p[1] for p in pts]}
            for tag, pts in sorted(curves.items())
        ]
        png = os.path.join(out_dir, f"{name}.png")
        _plot_lines(series, name.replace("_", " "), "epoch", ylabel, png)
        _write_sidecar(os.path.join(out_dir, f"{name}.json"), name, series)
        emitted.append(png)

    # accuracy vs epsilon per attack family
    sweep_records = [r for r in records if r.attack_tag and r.corruption_tag is None]
    for family in sorted({_attack_family(r) for r in sweep_records}):
        fam_records = [r for r in sweep_records if _attack_family(r) == family]
        dataset_tags = {r.dataset_tag for r in fam_records}
        groups = {}
        for r in fam_records:
            label = _series_label(r.model_tag, r.dataset_tag, dataset_tags)
            groups.setdefault(label, []).append((r.epsilon, r.accuracy))
        name = f"{family}_accuracy_vs_epsilon"
        series = [
            {"label": label, "x": [p[0] for p in sorted(pts)], "y": [p[1] for p in sorted(pts)]}
            for label, pts in sorted(groups.items())
        ]
        png = os.path.join(out_dir, f"{name}.png")
        _plot_lines(series, f"accuracy under {family}", "epsilon", "accuracy", png)
        _write_sidecar(os.path.join(out_dir, f"{name}.json"), name, series)
        emitted.append(png)

    # grouped bars per corruption (clean records only)
    corr = [r for r in records if r.corruption_tag and r.attack_tag is None]
    if corr:
        tags = sorted({r.corruption_tag for r in corr})
        models = sorted({r.model_tag for r in corr})
        series = []
        for m in models:
            by_tag = {r.corruption_tag: r.accuracy for r in corr if r.model_tag == m}
            series.append({"label": m, "x": tags, "y": [by_tag.get(t) for t in tags]})
        name = "corruption_accuracy_bars"
        fig, ax = plt.subplots(figsize=(max(6, 0.5 * len(tags)), 3.5))
        width = 0.8 / max(1, len(models))
        for i, entry in enumerate(series):
            xs = [j + i * width for j in range(len(tags))]
            ax.bar(xs, [v if v is not None else 0 for v in entry["y"]], width, label=entry["label"])
        ax.set_xticks([j + width * (len(models) - 1) / 2 for j in range(len(tags))])
        ax.set_xticklabels(tags, rotation=60, ha="right", fontsize=7)
        ax.set_ylabel("accuracy")
        ax.set_title("accuracy per corruption")
        ax.legend()
        png = os.path.join(out_dir, f"{name}.png")
        fig.savefig(png, bbox_inches="tight", dpi=150)
        plt.close(fig)
        _write_sidecar(os.path.join(out_dir, f"{name}.json"), name, series)
        emitted.append(png)
    else:
        warnings.warn("no corruption records; skipping corruption bars")

    return emitted
