"""Model-based counterfactual advantage learning for sequential recommendation."""
from .config import ExperimentConfig, load_config
from .data import BehaviorSpace, Dataset, Trajectory, apply_mask, load_dataset, mask_positions, save_dataset
from .harness import run_batch_rl, run_experiment, run_growing_batch_rl
from .simulator import SimConfig, UserSimulator

__version__ = "0.1.0"

__all__ = [
    "BehaviorSpace",
    "Dataset",
    "ExperimentConfig",
    "SimConfig",
    "Trajectory",
    "UserSimulator",
    "apply_mask",
    "load_config",
    "load_dataset",
    "mask_positions",
    "run_batch_rl",
    "run_experiment",
    "run_growing_batch_rl",
    "save_dataset",
]
