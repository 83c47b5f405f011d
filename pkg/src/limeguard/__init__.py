"""limeguard: local-surrogate explanations, spurious-feature detection, and
explanation-guided robust retraining for small image classifiers.

Typical flow: train a classifier (`models`), explain its decisions with a
weighted linear surrogate over interpretable segments (`lime`), flag
features that are influential, hypersensitive, or unstable (`detection`),
retrain with masking, gradient penalties, and adversarial examples
(`refinement`), then benchmark clean/adversarial/corruption accuracy
(`evaluation`). `experiment` and the `limeguard` CLI run the whole pipeline
from a JSON config.
"""

from .attacks import AttackConfig, attack, fgsm, fgsm_spurious, pgd
from .checkpoint import FORMAT_TAG, load_checkpoint, save_checkpoint
from .data import (
    SyntheticSpuriousSpec,
    generate_synthetic_spurious,
    load_cifar,
    load_corruptions,
    stratified_subsample,
)
from .detection import (
    DetectionConfig,
    DetectionThresholds,
    FeatureTemplate,
    SpuriousFeatureSet,
    aggregate_spurious,
    calibrate_thresholds,
    detect_spurious,
    feature_instability,
    feature_sensitivity,
    flag_features,
)
from .errors import (
    CapabilityError,
    ConfigurationError,
    DivergenceError,
    ExplanationError,
    IngestionError,
    NumericalError,
)
from .evaluation import (
    MetricsRecord,
    MetricsStore,
    adversarial_accuracy,
    corruption_sweep,
    epsilon_sweep,
    standard_accuracy,
)
from .experiment import ExperimentConfig, prepare_data, run_experiment
from .figures import emit_figures
from .lime import (
    FeatureExplanation,
    LimeConfig,
    PerturbationSet,
    Segmentation,
    explain,
    explain_redraws,
    fit_surrogate,
    importance_heatmap,
    kernel_weight,
    sample_perturbations,
    segment_input,
)
from .models import (
    Classifier,
    LabeledBatch,
    OptimizerConfig,
    TorchClassifier,
    TrainingStats,
    create_model,
    forward,
    input_gradient,
    task_loss,
    train_epochs,
)
from .refinement import (
    RefinementConfig,
    RefinementTrace,
    apply_mask,
    augmented_loss,
    combined_loss,
    refine,
    sensitivity_reg_loss,
    spurious_gradient_norm,
)

__version__ = "0.1.0"
