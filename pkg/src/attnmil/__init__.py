"""Attention-guided multiple-instance learning on synthetic volumes.

A joint image-level classifier and voxel-level segmenter trained under
partial supervision: every training volume carries an image label,
only a subset carries voxel masks.  A learned attention field bridges
the two heads, weighting MIL pooling for classification and splitting
unlabeled volumes into foreground/background bags that supervise the
local head.
"""

from .autodiff import Tape, Tensor, backward
from .backbone import (
    BackboneConfig,
    FeatureMap,
    ModelParams,
    extract_features,
    init_params,
    load_params,
    save_params,
)
from .data import (
    DatasetManifest,
    VolumeSample,
    generate_dataset,
    load_dataset,
    load_sample,
    normalize_intensity,
    save_sample,
    synthesize_samples,
)
from .evaluation import (
    MetricsReport,
    classification_metrics,
    dsc,
    emit_report,
    evaluate_model,
    predict_image,
    predict_voxels,
)
from .separation import Separation, clustering_cost, separate_regions
from .training import TrainConfig, TrainState, train
from .variants import VariantConfig, pvpl_self_training

__version__ = "0.1.0"

__all__ = [
    "BackboneConfig",
    "DatasetManifest",
    "FeatureMap",
    "MetricsReport",
    "ModelParams",
    "Separation",
    "Tape",
    "Tensor",
    "TrainConfig",
    "TrainState",
    "VariantConfig",
    "VolumeSample",
    "backward",
    "classification_metrics",
    "clustering_cost",
    "dsc",
    "emit_report",
    "evaluate_model",
    "extract_features",
    "generate_dataset",
    "init_params",
    "load_dataset",
    "load_params",
    "load_sample",
    "normalize_intensity",
    "predict_image",
    "predict_voxels",
    "pvpl_self_training",
    "save_params",
    "save_sample",
    "separate_regions",
    "synthesize_samples",
    "train",
]
