"""Unsupervised outlier detection for small RGB images.

Three detectors share one scoring back end: k-th nearest-neighbour
distance on raw pixels, on convolutional-autoencoder embeddings, and on
embeddings from an autoencoder whose encoder carries CBAM attention.
"""

from .attention import CbamBlock, ChannelAttention, SpatialAttention, cbam
from .cae import CaeEmbedder, CaeModel, CaeSpec, LossHistory, TrainConfig, build_cae, train_cae
from .datasets import (
    SUBSETS,
    Category,
    CatalogRow,
    LabeledDataset,
    SubsetSpec,
    build_subset,
    categorize,
    preprocess,
    split,
    synth_dataset,
    synth_galaxy,
)
from .exceptions import (
    AstroOutliersError,
    ConfigError,
    DataError,
    MetricError,
    ModelLoadError,
    ShapeError,
    StateError,
    TrainingDivergedError,
)
from .knn import KnnConfig, KnnOutlierDetector, OutlierScores, detect, knn_scores, top_m_flagged
from .metrics import MetricReport, auc_rank, confusion, fraction_sweep, prf_metrics, roc_auc
from .persistence import load_model, save_model
from .pipeline import ExperimentConfig, RunReport, emit_report, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AstroOutliersError",
    "CaeEmbedder",
    "CaeModel",
    "CaeSpec",
    "CatalogRow",
    "Category",
    "CbamBlock",
    "ChannelAttention",
    "ConfigError",
    "DataError",
    "ExperimentConfig",
    "KnnConfig",
    "KnnOutlierDetector",
    "LabeledDataset",
    "LossHistory",
    "MetricError",
    "MetricReport",
    "ModelLoadError",
    "OutlierScores",
    "RunReport",
    "SUBSETS",
    "ShapeError",
    "SpatialAttention",
    "StateError",
    "SubsetSpec",
    "TrainConfig",
    "TrainingDivergedError",
    "auc_rank",
    "build_cae",
    "build_subset",
    "categorize",
    "cbam",
    "confusion",
    "detect",
    "emit_report",
    "fraction_sweep",
    "knn_scores",
    "load_model",
    "preprocess",
    "prf_metrics",
    "roc_auc",
    "run_experiment",
    "save_model",
    "split",
    "synth_dataset",
    "synth_galaxy",
    "top_m_flagged",
    "train_cae",
]
