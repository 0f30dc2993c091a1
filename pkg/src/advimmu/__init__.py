"""Temporal-feature segmentation with unrolled regularizers and cluster-based pseudo-labels."""

from .config import RunConfig, derive_seed, load_config
from .metrics import confusion_matrix, mapped_miou, seg_metrics
from .sbicac import sbicac_cluster
from .synth import ConfigError, DatasetError, SceneConfig, generate_sequence
from .unfolding import UnfoldParams, unfold_backward, unfold_forward

__version__ = "0.1.0"

__all__ = [
    "ConfigError",
    "DatasetError",
    "RunConfig",
    "SceneConfig",
    "UnfoldParams",
    "confusion_matrix",
    "derive_seed",
    "generate_sequence",
    "load_config",
    "mapped_miou",
    "sbicac_cluster",
    "seg_metrics",
    "unfold_backward",
    "unfold_forward",
]
