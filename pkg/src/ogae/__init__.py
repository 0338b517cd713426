"""OCSVM-guided autoencoder representation learning for anomaly detection.

The interesting parts live in submodules; this namespace re-exports the
pieces most callers need: configuration + training (`TrainConfig`,
`train_ogae`), the exact dual solver (`solve_dual`), scoring and
evaluation (`score_samples`, `evaluate_scores`, `paired_bootstrap`) and
the corrupted-digit benchmark plumbing (`build_experiment1_splits`,
`run_benchmark`). The `ogae` console script in `ogae.cli` drives the same
functions from the command line.
"""

from .data import (
    CORRUPTION_KINDS,
    CorruptionSpec,
    LabeledImageSet,
    apply_corruption,
    binary_labels,
    build_experiment1_splits,
    corrupt_set,
    load_idx,
    load_npy_corrupted,
)
from .errors import (
    DataFormatError,
    NumericError,
    OgaeError,
    ShapeError,
    SolverError,
    UsageError,
)
from .guidance import GuidanceConfig, latent_spread, ogae_loss, split_batch
from .kernels import KernelSpec, cross_gram, default_gamma, gram
from .metrics import (
    auroc,
    auroc30,
    aupr,
    evaluate_scores,
    paired_bootstrap,
    partial_auroc,
)
from .nets import Adam, Autoencoder, AutoencoderSpec, load_checkpoint, save_checkpoint
from .ocsvm import OcsvmSolution, OcsvmSpec, decision, implicit_grad, solve_dual
from .pipeline import (
    METHODS,
    ExperimentManifest,
    FinalFit,
    TrainConfig,
    aggregate_patch_map,
    fit_final_ocsvm,
    hyperparameter_search,
    patch_anomaly_map,
    run_benchmark,
    score_samples,
    train_ogae,
)
from .synth import synthetic_archives, synthetic_digit_archive

__version__ = "0.1.0"

__all__ = [
    "Adam",
    "Autoencoder",
    "AutoencoderSpec",
    "CORRUPTION_KINDS",
    "CorruptionSpec",
    "DataFormatError",
    "ExperimentManifest",
    "FinalFit",
    "GuidanceConfig",
    "KernelSpec",
    "LabeledImageSet",
    "METHODS",
    "NumericError",
    "OcsvmSolution",
    "OcsvmSpec",
    "OgaeError",
    "ShapeError",
    "SolverError",
    "TrainConfig",
    "UsageError",
    "aggregate_patch_map",
    "apply_corruption",
    "auroc",
    "auroc30",
    "aupr",
    "binary_labels",
    "build_experiment1_splits",
    "corrupt_set",
    "cross_gram",
    "decision",
    "default_gamma",
    "evaluate_scores",
    "fit_final_ocsvm",
    "gram",
    "hyperparameter_search",
    "implicit_grad",
    "latent_spread",
    "load_checkpoint",
    "load_idx",
    "load_npy_corrupted",
    "ogae_loss",
    "paired_bootstrap",
    "partial_auroc",
    "patch_anomaly_map",
    "run_benchmark",
    "save_checkpoint",
    "score_samples",
    "solve_dual",
    "split_batch",
    "synthetic_archives",
    "synthetic_digit_archive",
    "train_ogae",
]
