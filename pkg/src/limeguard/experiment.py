"""Config-driven end-to-end experiment runner.

A run trains a baseline, refines it, evaluates both models over the attack
grid (plus out-of-distribution or corruption sets when configured), appends
everything to a JSONL metrics store, and emits figures. Completed stages are
recorded in a manifest so a re-run on the same output directory resumes
from checkpoints instead of retraining. All file writes are atomic.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import dataclass, field, fields

import numpy as np

from .attacks import AttackConfig
from .checkpoint import file_sha256, load_checkpoint, save_checkpoint
from .data import (
    SyntheticSpuriousSpec,
    generate_synthetic_spurious,
    load_cifar,
    load_corruptions,
    stratified_subsample,
)
from .detection import DetectionConfig, DetectionThresholds
from .errors import ConfigurationError
from .evaluation import (
    DEFAULT_EPSILONS,
    MetricsRecord,
    MetricsStore,
    corruption_sweep,
    epsilon_sweep,
    standard_accuracy,
)
from .figures import emit_figures
from .lime import LimeConfig
from .models import LabeledBatch, OptimizerConfig, create_model, task_loss, train_epochs
from .refinement import RefinementConfig, refine

SCHEMA_VERSION = 1
MANIFEST_NAME = "MANIFEST.json"
STAGES = ("baseline", "refine", "evaluate", "figures")


def _strict_kwargs(cls, obj, context):
    names = {f.name for f in fields(cls)}
    unknown = set(obj) - names
    if unknown:
        raise ConfigurationError(f"unknown keys in {context}: {sorted(unknown)}")
    return obj


@dataclass
class DatasetSpec:
    name: str = "synthetic"  # synthetic | cifar10 | cifar100
    path: str | None = None
    val_size: int = 5000  # carved from the train split for detection/probing
    max_samples: int | None = None  # stratified train subsample
    synthetic: SyntheticSpuriousSpec = field(default_factory=SyntheticSpuriousSpec)
    corruptions_dir: str | None = None
    corruption_severity: int | None = None

    def to_dict(self):
        return {
            "name": self.name,
            "path": self.path,
            "val_size": self.val_size,
            "max_samples": self.max_samples,
            "synthetic": self.synthetic.to_dict(),
            "corruptions_dir": self.corruptions_dir,
            "corruption_severity": self.corruption_severity,
        }

    @staticmethod
    def from_dict(obj):
        obj = dict(_strict_kwargs(DatasetSpec, obj, "dataset"))
        if "synthetic" in obj and isinstance(obj["synthetic"], dict):
            obj["synthetic"] = SyntheticSpuriousSpec(
                **_strict_kwargs(SyntheticSpuriousSpec, obj["synthetic"], "dataset.synthetic")
            )
        return DatasetSpec(**obj)


@dataclass
class ModelSpec:
    architecture: str = "small-cnn"

    def to_dict(self):
        return {"architecture": self.architecture}

    @staticmethod
    def from_dict(obj):
        return ModelSpec(**_strict_kwargs(ModelSpec, obj, "model"))


@dataclass
class TrainingSpec:
    epochs: int = 10
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)

    def to_dict(self):
        return {"epochs": self.epochs, "optimizer": self.optimizer.to_dict()}

    @staticmethod
    def from_dict(obj):
        obj = dict(_strict_kwargs(TrainingSpec, obj, "training"))
        if "optimizer" in obj and isinstance(obj["optimizer"], dict):
            obj["optimizer"] = OptimizerConfig(
                **_strict_kwargs(OptimizerConfig, obj["optimizer"], "training.optimizer")
            )
        return TrainingSpec(**obj)


@dataclass
class EvalSpec:
    families: tuple = ("fgsm", "pgd")
    epsilons: tuple = DEFAULT_EPSILONS
    pgd_steps: int = 40
    max_samples: int | None = None  # stratified eval subsample
    audit: bool = False
    corruptions: bool = False

    def to_dict(self):
        return {
            "families": list(self.families),
            "epsilons": list(self.epsilons),
            "pgd_steps": self.pgd_steps,
            "max_samples": self.max_samples,
            "audit": self.audit,
            "corruptions": self.corruptions,
        }

    @staticmethod
    def from_dict(obj):
        obj = dict(_strict_kwargs(EvalSpec, obj, "evaluation"))
        if "families" in obj:
            obj["families"] = tuple(obj["families"])
        if "epsilons" in obj:
            obj["epsilons"] = tuple(obj["epsilons"])
        return EvalSpec(**obj)


def _refinement_from_dict(obj):
    obj = dict(obj)
    mapping = {"lambda": "lam"}
    out = {}
    for key, value in obj.items():
        out[mapping.get(key, key)] = value
    _strict_kwargs(RefinementConfig, out, "refinement")
    if "attack_for_training" in out and isinstance(out["attack_for_training"], dict):
        out["attack_for_training"] = AttackConfig.from_dict(out["attack_for_training"])
    if "probe_attack" in out and isinstance(out["probe_attack"], dict):
        out["probe_attack"] = AttackConfig.from_dict(out["probe_attack"])
    if "optimizer" in out and isinstance(out["optimizer"], dict):
        out["optimizer"] = OptimizerConfig(
            **_strict_kwargs(OptimizerConfig, out["optimizer"], "refinement.optimizer")
        )
    if "detection" in out and isinstance(out["detection"], dict):
        det = dict(_strict_kwargs(DetectionConfig, out["detection"], "refinement.detection"))
        if "lime" in det and isinstance(det["lime"], dict):
            det["lime"] = LimeConfig(**_strict_kwargs(LimeConfig, det["lime"], "refinement.detection.lime"))
        if det.get("thresholds") is not None and isinstance(det["thresholds"], dict):
            det["thresholds"] = DetectionThresholds(**det["thresholds"])
        out["detection"] = DetectionConfig(**det)
    return RefinementConfig(**out)


@dataclass
class ExperimentConfig:
    output_dir: str
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    refinement: RefinementConfig = field(default_factory=RefinementConfig)
    evaluation: EvalSpec = field(default_factory=EvalSpec)
    seed: int = 0
    schema_version: int = SCHEMA_VERSION

    def to_dict(self):
        return {
            "schema_version": self.schema_version,
            "output_dir": self.output_dir,
            "dataset": self.dataset.to_dict(),
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "refinement": self.refinement.to_dict(),
            "evaluation": self.evaluation.to_dict(),
            "seed": self.seed,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @staticmethod
    def from_dict(obj) -> "ExperimentConfig":
        obj = dict(_strict_kwargs(ExperimentConfig, obj, "experiment config"))
        version = obj.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigurationError(f"unsupported schema_version {version}")
        if "dataset" in obj:
            obj["dataset"] = DatasetSpec.from_dict(obj["dataset"])
        if "model" in obj:
            obj["model"] = ModelSpec.from_dict(obj["model"])
        if "training" in obj:
            obj["training"] = TrainingSpec.from_dict(obj["training"])
        if "refinement" in obj:
            obj["refinement"] = _refinement_from_dict(obj["refinement"])
        if "evaluation" in obj:
            obj["evaluation"] = EvalSpec.from_dict(obj["evaluation"])
        return ExperimentConfig(schema_version=version, **obj)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        return ExperimentConfig.from_dict(json.loads(text))

    @staticmethod
    def load(path) -> "ExperimentConfig":
        with open(path) as fh:
            return ExperimentConfig.from_json(fh.read())


@dataclass
class DataBundle:
    train: LabeledBatch
    val: LabeledBatch
    test: LabeledBatch
    ood: LabeledBatch | None = None
    corruptions: dict | None = None
    input_shape: tuple = ()
    num_classes: int = 0
    tag: str = ""


def prepare_data(config: ExperimentConfig) -> DataBundle:
    ds = config.dataset
    if ds.name == "synthetic":
        synth = generate_synthetic_spurious(ds.synthetic)
        train = synth.train
        val_size = min(ds.val_size, len(train) // 5)
        val, train = _carve_val(train, val_size, config.seed)
        if ds.max_samples:
            train = stratified_subsample(train, ds.max_samples, config.seed)
        return DataBundle(
            train=train,
            val=val,
            test=synth.test,
            ood=synth.ood,
            input_shape=tuple(train.inputs.shape[1:]),
            num_classes=ds.synthetic.num_classes,
            tag="synthetic",
        )
    if ds.name in ("cifar10", "cifar100"):
        if not ds.path:
            raise ConfigurationError(f"dataset.path required for {ds.name}")
        train, test = load_cifar(ds.path, ds.name)
        val, train = _carve_val(train, ds.val_size, config.seed)
        if ds.max_samples:
            train = stratified_subsample(train, ds.max_samples, config.seed)
        corruptions = None
        if ds.corruptions_dir and config.evaluation.corruptions:
            corruptions = load_corruptions(ds.corruptions_dir, ds.corruption_severity)
        return DataBundle(
            train=train,
            val=val,
            test=test,
            corruptions=corruptions,
            input_shape=tuple(train.inputs.shape[1:]),
            num_classes=10 if ds.name == "cifar10" else 100,
            tag=ds.name,
        )
    raise ConfigurationError(f"unknown dataset {ds.name!r}")


def _carve_val(train: LabeledBatch, val_size: int, seed: int):
    rng = np.random.default_rng(seed)
    idx = rng.permutation(len(train))
    return train.subset(idx[:val_size]), train.subset(idx[val_size:])


class _Manifest:
    def __init__(self, out_dir, config_sha):
        self.path = os.path.join(out_dir, MANIFEST_NAME)
        self.data = {"config_sha": config_sha, "stages": {}, "failed_stage": None}
        if os.path.exists(self.path):
            with open(self.path) as fh:
                existing = json.load(fh)
            if existing.get("config_sha") == config_sha:
                self.data = existing
                self.data["failed_stage"] = None

    def completed(self, stage) -> bool:
        return self.data["stages"].get(stage, {}).get("completed", False)

    def mark(self, stage, **info):
        self.data["stages"][stage] = {"completed": True, **info}
        self.save()

    def fail(self, stage):
        self.data["failed_stage"] = stage
        self.save()

    def save(self):
        tmp = f"{self.path}.tmp"
        with open(tmp, "w") as fh:
            json.dump(self.data, fh, indent=2)
        os.replace(tmp, self.path)


def _atomic_write(path, text):
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _eval_split(bundle: DataBundle, spec: EvalSpec, seed: int):
    test = bundle.test
    if spec.max_samples:
        test = stratified_subsample(test, spec.max_samples, seed)
    return test


def _evaluate_model(model, tag, bundle, config, store):
    spec = config.evaluation
    test = _eval_split(bundle, spec, config.seed)
    records = [
        standard_accuracy(
            model, test, model_tag=tag, dataset_tag=f"{bundle.tag}-test", seed=config.seed, audit=spec.audit
        )
    ]
    for family in spec.families:
        records.extend(
            epsilon_sweep(
                model,
                test,
                family,
                sorted(spec.epsilons),
                model_tag=tag,
                dataset_tag=f"{bundle.tag}-test",
                seed=config.seed,
                audit=spec.audit,
                make_config=lambda fam, eps: _sweep_config(fam, eps, spec),
            )
        )
    if bundle.ood is not None:
        ood = bundle.ood
        if spec.max_samples:
            ood = stratified_subsample(ood, spec.max_samples, config.seed)
        records.append(
            standard_accuracy(
                model, ood, model_tag=tag, dataset_tag=f"{bundle.tag}-ood", seed=config.seed, audit=spec.audit
            )
        )
    if bundle.corruptions:
        records.extend(
            corruption_sweep(model, bundle.corruptions, model_tag=tag, seed=config.seed, audit=spec.audit)
        )
    store.append(records)
    return records


def _sweep_config(family, epsilon, spec: EvalSpec):
    if family == "pgd":
        return AttackConfig("pgd", epsilon, step_size=max(epsilon / 3.0, 1e-4), steps=spec.pgd_steps)
    return AttackConfig(family, epsilon)


def run_experiment(config: ExperimentConfig) -> dict:
    """Execute every stage, resuming from completed ones. Returns a summary.

    On a stage failure the manifest records the failed stage and the
    exception propagates; partial artifacts stay on disk.
    """
    out = config.output_dir
    os.makedirs(out, exist_ok=True)
    ckpt_dir = os.path.join(out, "checkpoints")
    fig_dir = os.path.join(out, "figures")
    os.makedirs(ckpt_dir, exist_ok=True)

    config_text = config.to_json()
    config_sha = hashlib.sha256(config_text.encode()).hexdigest()
    _atomic_write(os.path.join(out, "config.json"), config_text)
    manifest = _Manifest(out, config_sha)
    store = MetricsStore(os.path.join(out, "metrics.jsonl"))

    bundle = prepare_data(config)
    baseline_path = os.path.join(ckpt_dir, "baseline.ckpt")
    refined_path = os.path.join(ckpt_dir, "refined.ckpt")
    summary = {"output_dir": out}

    stage = "baseline"
    try:
        if manifest.completed(stage) and os.path.exists(baseline_path):
            baseline, _ = load_checkpoint(baseline_path)
        else:
            baseline = create_model(
                config.model.architecture, bundle.num_classes, bundle.input_shape, seed=config.seed
            )
            stats = train_epochs(
                baseline,
                bundle.train,
                task_loss,
                config.training.optimizer,
                config.training.epochs,
                seed=config.seed,
            )
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
            sha = save_checkpoint(baseline_path, baseline, refinement_config=None)
            manifest.mark(stage, checkpoint=baseline_path, sha=sha)

        stage = "refine"
        if manifest.completed(stage) and os.path.exists(refined_path):
            refined, _ = load_checkpoint(refined_path)
        else:
            refined, _ = load_checkpoint(baseline_path)  # fresh copy of the baseline
            refined, trace = refine(refined, bundle.train, bundle.val, config.refinement)
            trace.save_jsonl(os.path.join(out, "refinement_trace.jsonl"))
            store.append(
                [
                    MetricsRecord(
                        model_tag="refined",
                        dataset_tag=f"{bundle.tag}-val",
                        accuracy=rec.clean_accuracy,
                        n_samples=len(bundle.val),
                        n_correct=round(rec.clean_accuracy * len(bundle.val)),
                        seed=config.seed,
                        wall_time=0.0,
                        epoch=rec.iteration,
                    )
                    for rec in trace.records
                ]
            )
            sha = save_checkpoint(
                refined_path,
                refined,
                refinement_config=config.refinement.to_dict(),
                lineage={
                    "parent_sha": file_sha256(baseline_path),
                    "iterations": len(trace.records),
                },
            )
            manifest.mark(stage, checkpoint=refined_path, sha=sha)

        stage = "evaluate"
        if not manifest.completed(stage):
            for tag, model in (("baseline", baseline), ("refined", refined)):
                _evaluate_model(model, tag, bundle, config, store)
            store.export_csv(os.path.join(out, "metrics.csv"))
            manifest.mark(stage, records=len(store.load()))

        stage = "figures"
        emitted = emit_figures(store, fig_dir)
        manifest.mark(stage, files=[os.path.basename(p) for p in emitted])
        summary["figures"] = emitted
    except Exception:
        manifest.fail(stage)
        raise

    summary["metrics"] = store.path
    summary["baseline_checkpoint"] = baseline_path
    summary["refined_checkpoint"] = refined_path
    return summary
