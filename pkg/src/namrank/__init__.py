"""Normalization attention ranking with inverse item frequency, plus
popularity-bias diagnostics and a synthetic experiment harness."""

from .dataio import (InteractionEvent, SyntheticConfig, TrainingSample, build_samples,
                     generate_synthetic, parse_log)
from .estimator import NAMRanker
from .evaluation import auc, compare_models, gauc
from .model import ModelConfig
from .popularity import ItemPopularity, PopularityBuckets, compute_item_stats
from .training import TrainConfig, esmm_loss, load_checkpoint, save_checkpoint, train

__all__ = [
    "InteractionEvent", "SyntheticConfig", "TrainingSample", "build_samples",
    "generate_synthetic", "parse_log", "NAMRanker", "auc", "compare_models", "gauc",
    "ModelConfig", "ItemPopularity", "PopularityBuckets", "compute_item_stats",
    "TrainConfig", "esmm_loss", "load_checkpoint", "save_checkpoint", "train",
]
__version__ = "0.1.0"
