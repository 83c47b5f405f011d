"""Command-line interface.

Subcommands: train, explain, detect, refine, attack, eval, figures, run.
Global flags (--config, --seed, --out, --max-samples, --audit) apply to every
subcommand and override the corresponding config fields.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .attacks import AttackConfig, attack, save_example_grid
from .checkpoint import load_checkpoint
from .detection import detect_spurious
from .errors import ConfigurationError
from .evaluation import MetricsStore, adversarial_accuracy
from .experiment import ExperimentConfig, prepare_data, run_experiment
from .figures import emit_figures
from .lime import explain as lime_explain
from .lime import save_heatmap_png
from .models import LabeledBatch


def _build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment config JSON")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", help="override output directory")
    common.add_argument("--max-samples", type=int, help="desk-scale cap (stratified by label)")
    common.add_argument("--audit", action="store_true", help="store per-sample correctness bitmaps")

    parser = argparse.ArgumentParser(prog="limeguard", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("run", parents=[common], help="end-to-end: train, refine, evaluate, figures")
    sub.add_parser("train", parents=[common], help="train the baseline model only")
    sub.add_parser("refine", parents=[common], help="train (if needed) and refine")
    sub.add_parser("eval", parents=[common], help="evaluate existing checkpoints")
    sub.add_parser("figures", parents=[common], help="re-emit figures from the metrics store")

    p = sub.add_parser("explain", parents=[common], help="explain one test input")
    p.add_argument("--checkpoint", help="model checkpoint (default: refined, else baseline)")
    p.add_argument("--index", type=int, default=0, help="test-split index to explain")

    p = sub.add_parser("detect", parents=[common], help="detect spurious features")
    p.add_argument("--checkpoint", help="model checkpoint (default: baseline)")

    p = sub.add_parser("attack", parents=[common], help="generate adversarial examples")
    p.add_argument("--checkpoint", help="model checkpoint (default: baseline)")
    p.add_argument("--family", default="fgsm", choices=("fgsm", "pgd"))
    p.add_argument("--epsilon", type=float, default=0.03)
    p.add_argument("--step-size", type=float, default=0.01)
    p.add_argument("--steps", type=int, default=40)
    return parser


def _load_config(args) -> ExperimentConfig:
    if not args.config:
        raise ConfigurationError("--config is required")
    config = ExperimentConfig.load(args.config)
    if args.seed is not None:
        config.seed = args.seed
    if args.out:
        config.output_dir = args.out
    if args.max_samples:
        config.dataset.max_samples = args.max_samples
        config.evaluation.max_samples = args.max_samples
    if args.audit:
        config.evaluation.audit = True
    return config


def _pick_checkpoint(config, explicit, prefer="refined"):
    if explicit:
        return explicit
    ckpt_dir = os.path.join(config.output_dir, "checkpoints")
    for name in (prefer, "refined", "baseline"):
        path = os.path.join(ckpt_dir, f"{name}.ckpt")
        if os.path.exists(path):
            return path
    raise ConfigurationError(f"no checkpoint under {ckpt_dir}; run 'limeguard train' first")


def _cmd_run(args):
    summary = run_experiment(_load_config(args))
    print(json.dumps(summary, indent=2))
    return 0


def _cmd_train(args):
    import hashlib

    from .checkpoint import save_checkpoint
    from .evaluation import MetricsRecord
    from .experiment import _Manifest
    from .models import create_model, task_loss, train_epochs

    config = _load_config(args)
    out = config.output_dir
    os.makedirs(os.path.join(out, "checkpoints"), exist_ok=True)
    bundle = prepare_data(config)
    model = create_model(config.model.architecture, bundle.num_classes, bundle.input_shape, seed=config.seed)
    stats = train_epochs(
        model, bundle.train, task_loss, config.training.optimizer, config.training.epochs, seed=config.seed
    )
    path = os.path.join(out, "checkpoints", "baseline.ckpt")
    sha = save_checkpoint(path, model)
    store = MetricsStore(os.path.join(out, "metrics.jsonl"))
    store.append(
        [
            MetricsRecord(
                model_tag="baseline",
                dataset_tag=f"{bundle.tag}-train",
                accuracy=acc,
                n_samples=len(bundle.train),
                n_correct=round(acc * len(bundle.train)),
                seed=config.seed,
                wall_time=0.0,
                epoch=i,
                loss=loss,
            )
            for i, (acc, loss) in enumerate(zip(stats.accuracies, stats.losses))
        ]
    )
    manifest = _Manifest(out, hashlib.sha256(config.to_json().encode()).hexdigest())
    manifest.mark("baseline", checkpoint=path, sha=sha)
    print(f"baseline checkpoint: {path} (final train accuracy {stats.accuracies[-1]:.4f})")
    return 0


def _cmd_refine(args):
    config = _load_config(args)
    from .checkpoint import save_checkpoint
    from .refinement import refine

    ckpt = _pick_checkpoint(config, None, prefer="baseline")
    model, _ = load_checkpoint(ckpt)
    bundle = prepare_data(config)
    model, trace = refine(model, bundle.train, bundle.val, config.refinement)
    out = config.output_dir
    trace.save_jsonl(os.path.join(out, "refinement_trace.jsonl"))
    path = os.path.join(out, "checkpoints", "refined.ckpt")
    from .checkpoint import file_sha256

    save_checkpoint(
        path,
        model,
        refinement_config=config.refinement.to_dict(),
        lineage={"parent_sha": file_sha256(ckpt), "iterations": len(trace.records)},
    )
    print(f"refined checkpoint: {path} ({len(trace.records)} iterations)")
    return 0


def _cmd_eval(args):
    config = _load_config(args)
    from .experiment import _evaluate_model

    bundle = prepare_data(config)
    store = MetricsStore(os.path.join(config.output_dir, "metrics.jsonl"))
    ckpt_dir = os.path.join(config.output_dir, "checkpoints")
    evaluated = 0
    for tag in ("baseline", "refined"):
        path = os.path.join(ckpt_dir, f"{tag}.ckpt")
        if not os.path.exists(path):
            continue
        model, _ = load_checkpoint(path)
        records = _evaluate_model(model, tag, bundle, config, store)
        evaluated += len(records)
        for rec in records:
            print(
                f"{rec.model_tag:9s} {rec.dataset_tag:16s} "
                f"{rec.attack_tag or rec.corruption_tag or 'clean':28s} acc={rec.accuracy:.4f}"
            )
    if not evaluated:
        raise ConfigurationError(f"no checkpoints under {ckpt_dir}")
    store.export_csv(os.path.join(config.output_dir, "metrics.csv"))
    return 0


def _cmd_explain(args):
    config = _load_config(args)
    model, _ = load_checkpoint(_pick_checkpoint(config, args.checkpoint))
    bundle = prepare_data(config)
    x = bundle.test.inputs[args.index].numpy()
    expl = lime_explain(model, x, config.refinement.detection.lime)
    os.makedirs(config.output_dir, exist_ok=True)
    json_path = os.path.join(config.output_dir, f"explanation_{args.index}.json")
    with open(json_path, "w") as fh:
        fh.write(expl.to_json())
    png_path = os.path.join(config.output_dir, f"explanation_{args.index}.png")
    save_heatmap_png(expl, png_path)
    top = int(np.argmax(expl.importance))
    print(f"explained class {expl.explained_class}; strongest feature {top}")
    print(f"wrote {json_path} and {png_path}")
    return 0


def _cmd_detect(args):
    config = _load_config(args)
    model, _ = load_checkpoint(_pick_checkpoint(config, args.checkpoint, prefer="baseline"))
    bundle = prepare_data(config)
    rng = np.random.default_rng(config.seed)
    k = min(config.refinement.detection_sample, len(bundle.val))
    sample = bundle.val.subset(rng.choice(len(bundle.val), size=k, replace=False))
    result = detect_spurious(model, sample, config.refinement.detection, source=bundle.tag)
    os.makedirs(config.output_dir, exist_ok=True)
    path = os.path.join(config.output_dir, "spurious_features.json")
    with open(path, "w") as fh:
        fh.write(result.feature_set.to_json())
    print(f"flagged features: {result.feature_set.members}")
    print(f"wrote {path}")
    return 0


def _cmd_attack(args):
    config = _load_config(args)
    model, _ = load_checkpoint(_pick_checkpoint(config, args.checkpoint, prefer="baseline"))
    bundle = prepare_data(config)
    test = bundle.test
    if config.evaluation.max_samples:
        from .data import stratified_subsample

        test = stratified_subsample(test, config.evaluation.max_samples, config.seed)
    if args.family == "pgd":
        cfg = AttackConfig("pgd", args.epsilon, step_size=args.step_size, steps=args.steps)
    else:
        cfg = AttackConfig("fgsm", args.epsilon)
    rec = adversarial_accuracy(
        model, test, cfg, model_tag="model", dataset_tag=f"{bundle.tag}-test",
        seed=config.seed, audit=config.evaluation.audit,
    )
    os.makedirs(config.output_dir, exist_ok=True)
    grid_path = os.path.join(config.output_dir, f"adversarial_{args.family}.png")
    sample = test.subset(np.arange(min(8, len(test))))
    save_example_grid(sample, attack(model, sample, cfg), grid_path)
    print(f"{cfg.tag}: adversarial accuracy {rec.accuracy:.4f} over {rec.n_samples} samples")
    print(f"wrote {grid_path}")
    return 0


def _cmd_figures(args):
    config = _load_config(args)
    store = MetricsStore(os.path.join(config.output_dir, "metrics.jsonl"))
    emitted = emit_figures(store, os.path.join(config.output_dir, "figures"))
    for path in emitted:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "run": _cmd_run,
    "train": _cmd_train,
    "refine": _cmd_refine,
    "eval": _cmd_eval,
    "explain": _cmd_explain,
    "detect": _cmd_detect,
    "attack": _cmd_attack,
    "figures": _cmd_figures,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as exc:  # surface a clean error, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
