"""Representation-balancing MDP models for off-policy policy evaluation."""
from .balance import KernelSpec, mmd_estimate
from .dataset import Dataset, Trajectory, annotate, collect, split
from .environments import make
from .estimators import EstimateResult
from .harness import ExperimentConfig, RmseReport, run_experiment
from .model import RepBmConfig, RepBmModel, train
from .policies import Policy

__version__ = "0.1.0"

__all__ = [
    "Dataset", "EstimateResult", "ExperimentConfig", "KernelSpec", "Policy", "RepBmConfig",
    "RepBmModel", "RmseReport", "Trajectory", "annotate", "collect", "make", "mmd_estimate",
    "run_experiment", "split", "train",
]
