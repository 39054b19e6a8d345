"""Future-conditioned offline RL: a contrastive objective that keeps environment randomness out of the
conditioning latent, return-conditioned and VAE baselines, and exact consistency diagnostics."""
from __future__ import annotations

from .datasets import Dataset, NegativeSampler, build_negative_sampler, collect, literal_dataset, load, save
from .environments import (
    Environment,
    MarkovPolicy,
    Trajectory,
    bandit_env,
    counterexample_env,
    enumerate_trajectories,
    frozen_lake_env,
    make_env,
    sample_episode,
    toy_tree_env,
)
from .inference import (
    EvalReport,
    conditioned_policy,
    consistency_gap,
    counterexample_check,
    evaluate,
    exact_policy_value,
    mi_exact_discrete,
    select_latent,
)
from .models import NeuralBundle, TabularBundle, load_checkpoint, save_checkpoint
from .objectives import TrainConfig, train

__all__ = [
    "Dataset",
    "NegativeSampler",
    "build_negative_sampler",
    "collect",
    "literal_dataset",
    "load",
    "save",
    "Environment",
    "MarkovPolicy",
    "Trajectory",
    "bandit_env",
    "counterexample_env",
    "enumerate_trajectories",
    "frozen_lake_env",
    "make_env",
    "sample_episode",
    "toy_tree_env",
    "EvalReport",
    "conditioned_policy",
    "consistency_gap",
    "counterexample_check",
    "evaluate",
    "exact_policy_value",
    "mi_exact_discrete",
    "select_latent",
    "NeuralBundle",
    "TabularBundle",
    "load_checkpoint",
    "save_checkpoint",
    "TrainConfig",
    "train",
]

__version__ = "0.1.0"
