"""SYNTH experiment protocol shared by the acceptance suite and scripts/."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .analysis import evaluate
from .data import Normalizer, feature_ranges, train_val_split
from .growth import GrowthConfig, grow
from .simplify import axis_aligned_accuracy, prune_axis_aligned, to_axis_aligned
from .synth import SynthConfig, generate_dataset
from .training import TrainingConfig, train_fixed_topology
from .tree import RecurrenceModel, TreeTopology, n_parameters_for, random_policy

log = logging.getLogger(__name__)


def synth_splits(seed: int, n_noise_dims: int = 10, n_patients: int = 1000):
    """90/10 train/test split, then 10% of the training part held out for validation."""
    data = generate_dataset(SynthConfig(n_patients=n_patients, n_noise_dims=n_noise_dims, seed=seed))
    rng = np.random.default_rng(seed)
    train_val, test = train_val_split(data, 0.1, rng)
    train, val = train_val_split(train_val, 0.1, rng)
    return train, val, test, rng


@dataclass
class SeedReport:
    seed: int
    recurrent_auroc: Optional[float] = None
    recurrent_brier: Optional[float] = None
    recurrent_accuracy: Optional[float] = None
    unpruned_accuracy: Optional[float] = None
    depth: int = 0
    n_parameters: int = 0
    static_auroc: Optional[float] = None
    complete_auroc: Optional[float] = None
    complete_parameters: int = 0
    root_feature: Optional[int] = None
    axis_accuracy: Optional[float] = None
    failures: int = 0
    seconds: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        return asdict(self)


def _root_feature(policy, train, val) -> Optional[int]:
    """Root test of the pruned axis-aligned tree at the first step (h = 0)."""
    tree = to_axis_aligned(policy, np.zeros(policy.hist_dim), 1)
    obs = np.array([tr.observations[0] for tr in val])
    tree = prune_axis_aligned(tree, feature_ranges(train), obs, 0.05)
    node = tree.nodes[tree.root]
    return getattr(node, "feature", None)


def run_seed(seed: int, hist_dim: int = 8, static: bool = True, complete: bool = True,
             training: Optional[TrainingConfig] = None) -> SeedReport:
    """Grown recurrent model, static ablation and complete depth-5 baseline for one seed."""
    training = training or TrainingConfig(seed=seed)
    train, val, test, rng = synth_splits(seed)
    rep = SeedReport(seed)

    t0 = time.perf_counter()
    res = grow(train, val, GrowthConfig(), training, rng, hist_dim=hist_dim, recurrence=RecurrenceModel.MATRIX_HIST)
    rep.seconds["recurrent"] = time.perf_counter() - t0
    report = evaluate(res.policy, test)
    rep.recurrent_auroc, rep.recurrent_brier, rep.recurrent_accuracy = report.auroc, report.brier, report.accuracy
    rep.unpruned_accuracy = evaluate(res.unpruned, test).accuracy
    rep.depth = res.policy.topology.depth
    rep.n_parameters = res.policy.n_parameters()
    rep.failures = res.training_failures
    rep.root_feature = _root_feature(res.policy, train, val)
    rep.axis_accuracy = axis_aligned_accuracy(res.policy, test)

    if static:
        t0 = time.perf_counter()
        st = grow(train, val, GrowthConfig(), training, rng, hist_dim=0, recurrence=RecurrenceModel.FIXED_TANH)
        rep.seconds["static"] = time.perf_counter() - t0
        rep.static_auroc = evaluate(st.policy, test).auroc

    rep.complete_parameters = n_parameters_for(TreeTopology.complete(5), train[0].obs_dim, 2, hist_dim,
                                               RecurrenceModel.MATRIX_HIST)
    if complete:
        t0 = time.perf_counter()
        pol = random_policy(TreeTopology.complete(5), train[0].obs_dim, 2, hist_dim, RecurrenceModel.MATRIX_HIST,
                            normalizer=Normalizer.fit(train), scale=training.init_scale, rng=rng)
        full = train_fixed_topology(pol, train, val, training, restart=True, rng=rng)
        rep.seconds["complete"] = time.perf_counter() - t0
        rep.complete_auroc = evaluate(full.policy, test).auroc
    log.info("seed %d: %s", seed, rep.as_dict())
    return rep


@dataclass
class L1Report:
    seed: int
    l1_weight: float
    multi_accuracy: float
    axis_accuracy: float
    depth: int


def run_l1(seed: int, l1_weight: float, n_noise_dims: int = 14, hist_dim: int = 8) -> L1Report:
    """Axis-aligned vs multidimensional accuracy on the padded (1 + 14 noise) SYNTH variant."""
    train, val, test, rng = synth_splits(seed, n_noise_dims)
    cfg = TrainingConfig(seed=seed, l1_weight=l1_weight)
    res = grow(train, val, GrowthConfig(), cfg, rng, hist_dim=hist_dim, recurrence=RecurrenceModel.MATRIX_HIST)
    return L1Report(seed, l1_weight, evaluate(res.policy, test).accuracy,
                    axis_aligned_accuracy(res.policy, test), res.policy.topology.depth)
