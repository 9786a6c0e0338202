"""Cosine-score collaborative filtering with sampled softmax and adaptive temperatures."""

from .dataset import (
    EmptyDataError,
    Interactions,
    ParseError,
    PopularityGrouping,
    SplitPair,
    inject_noise_grouped,
    inject_noise_uniform,
    k_core_filter,
    latent_interactions,
    load_split,
    parse_interactions,
    popularity_grouping,
    train_test_split,
    zipf_interactions,
)
from .embedding import EmbeddingTable, ZeroNormError, load_checkpoint, save_checkpoint, xavier_init
from .estimator import AdapTauRecommender
from .evaluation import EvalReport, evaluate, recall_ndcg_at_k, tau_sensitivity_sweep
from .losses import BatchTriples, sampled_softmax_loss
from .temperature import TemperatureState, lambert_w, tau0_full, tau0_oracle_bisect, tau0_simplified, user_temperatures
from .trainer import TrainConfig, TrainResult, train

__version__ = "0.1.0"

__all__ = [
    "AdapTauRecommender",
    "BatchTriples",
    "EmbeddingTable",
    "EmptyDataError",
    "EvalReport",
    "evaluate",
    "inject_noise_grouped",
    "inject_noise_uniform",
    "Interactions",
    "k_core_filter",
    "lambert_w",
    "latent_interactions",
    "load_checkpoint",
    "load_split",
    "parse_interactions",
    "ParseError",
    "popularity_grouping",
    "PopularityGrouping",
    "recall_ndcg_at_k",
    "sampled_softmax_loss",
    "save_checkpoint",
    "SplitPair",
    "tau0_full",
    "tau0_oracle_bisect",
    "tau0_simplified",
    "tau_sensitivity_sweep",
    "TemperatureState",
    "train",
    "train_test_split",
    "TrainConfig",
    "TrainResult",
    "user_temperatures",
    "xavier_init",
    "ZeroNormError",
    "zipf_interactions",
]
