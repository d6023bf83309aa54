"""Continuous-time sequence models for irregular, partially observed time series."""
from .experiment import ExperimentConfig, desk_profile, run_ablation, run_sparsity_sweep, run_training
from .metrics import evaluate_auc, evaluate_mse, rank_sum_test

__version__ = "0.1.0"

__all__ = ["ExperimentConfig", "desk_profile", "run_training", "run_ablation", "run_sparsity_sweep",
           "evaluate_mse", "evaluate_auc", "rank_sum_test"]
