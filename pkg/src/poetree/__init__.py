"""Recurrent soft decision trees for interpretable policy learning from demonstrations."""

from .analysis import EvaluationReport, evaluate
from .data import Normalizer, Trajectory
from .growth import GrowthConfig, grow
from .io import load_policy, read_trajectories, save_policy, write_trajectories
from .simplify import AxisAlignedTree, adjust_threshold_with_evolution, prune_axis_aligned, to_axis_aligned
from .synth import SynthConfig, generate_dataset
from .training import TrainingConfig, train_fixed_topology
from .tree import Gating, RecurrenceModel, TreePolicy, TreeTopology, rollout

__version__ = "0.1.0"

__all__ = [
    "AxisAlignedTree", "EvaluationReport", "Gating", "GrowthConfig", "Normalizer", "RecurrenceModel",
    "SynthConfig", "TrainingConfig", "Trajectory", "TreePolicy", "TreeTopology", "adjust_threshold_with_evolution",
    "evaluate", "generate_dataset", "grow", "load_policy", "prune_axis_aligned", "read_trajectories", "rollout",
    "save_policy", "to_axis_aligned", "train_fixed_topology", "write_trajectories",
]
