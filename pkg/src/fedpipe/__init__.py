"""Federated learning pipeline simulator.

Local SGD with averaging, update encoders (sparsification, dithered lattice
quantization, Gaussian privacy noise), orthogonal and over-the-air uplinks,
user selection and block assignment, robust and mixture combiners, and
convergence-bound calculators.
"""
from .config import ExperimentConfig, from_dict, load_config, validate
from .exceptions import (
    AllocationError, ChannelError, CombiningError, ConfigError, DimensionError, EmptyDatasetError, FedPipeError,
    NonFiniteError, RoundError, SeedMismatchError,
)
from .orchestrator import RunResult, initial_state, prepare_problem, read_model, run_experiment, run_round, run_sweep

__version__ = "0.1.0"

__all__ = [
    "ExperimentConfig", "from_dict", "load_config", "validate", "run_experiment", "run_round", "run_sweep",
    "prepare_problem", "initial_state", "read_model", "RunResult", "FedPipeError", "DimensionError",
    "EmptyDatasetError", "NonFiniteError", "SeedMismatchError", "ChannelError", "AllocationError",
    "CombiningError", "ConfigError", "RoundError",
]
