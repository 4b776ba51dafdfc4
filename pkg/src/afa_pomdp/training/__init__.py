"""Dataset collection, offline VAE pre-training and policy training."""

from .collect import CollectionError, collect_dataset, rollout
from .joint import METRIC_COLUMNS, JointResult, evaluate_policy, load_policy, train_joint
from .runtime import StartupError, env_versions, spawn_seeds
from .vae import EPOCH_COLUMNS, TrainingDivergence, load_vae, pretrain_vae

__all__ = [
    "CollectionError",
    "EPOCH_COLUMNS",
    "JointResult",
    "METRIC_COLUMNS",
    "StartupError",
    "TrainingDivergence",
    "collect_dataset",
    "env_versions",
    "evaluate_policy",
    "load_policy",
    "load_vae",
    "pretrain_vae",
    "rollout",
    "spawn_seeds",
    "train_joint",
]
