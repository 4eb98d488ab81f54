"""Incremental tree growth with validation-gated splits, then pruning.

Procedure: optimize a shallow complete tree; repeatedly split a suboptimal
leaf, optimize only the new subtree, and keep the split when validation
AUROC strictly improves (otherwise restore the snapshot and mark the leaf
optimal); finish with a global optimization and drop leaves whose average
validation path probability is below a threshold.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Normalizer, Trajectory, make_batch
from .tree import (
    INNER_KEYS,
    Gating,
    RecurrenceModel,
    StructureError,
    TreePolicy,
    TreeTopology,
    random_policy,
    rollout_batch,
)
from .training import TrainingConfig, TrainResult, train_fixed_topology, validation_score

log = logging.getLogger(__name__)


@dataclass
class GrowthConfig:
    max_depth: int = 5
    initial_depth: int = 2
    prune_threshold: float = 0.05
    split_margin: float = 0.0

    def __post_init__(self):
        if not 1 <= self.initial_depth <= self.max_depth:
            raise ValueError("need 1 <= initial_depth <= max_depth")
        if not 0.0 <= self.prune_threshold < 1.0:
            raise ValueError("prune_threshold must lie in [0, 1)")


@dataclass
class GrowthEvent:
    event: str  # split | reject | prune
    node_id: int
    depth: int
    val_auroc_before: Optional[float]
    val_auroc_after: Optional[float]
    reason: str = ""
    kept_child: Optional[int] = None

    def to_json(self) -> str:
        return json.dumps({k: v for k, v in asdict(self).items() if v is not None and v != ""})


@dataclass
class GrowthResult:
    policy: TreePolicy
    unpruned: TreePolicy
    events: list[GrowthEvent] = field(default_factory=list)
    val_auroc: Optional[float] = None
    training_failures: int = 0
    history: list = field(default_factory=list)


def initialize_tree(
    obs_dim: int, n_actions: int, hist_dim: int,
    recurrence: RecurrenceModel = RecurrenceModel.FIXED_TANH,
    rng: Optional[np.random.Generator] = None,
    normalizer: Optional[Normalizer] = None,
    gating: Gating = Gating.OBLIQUE,
    depth: int = 2, max_depth: int = 5, scale: float = 0.1,
) -> TreePolicy:
    """Complete tree of ``depth`` with N(0, scale^2) weights and leaf parameters, zero biases."""
    if obs_dim < 1 or n_actions < 1 or hist_dim < 0:
        raise ValueError("dimensions must be positive")
    return random_policy(
        TreeTopology.complete(depth, max_depth), obs_dim, n_actions, hist_dim,
        recurrence, gating, normalizer, scale, rng,
    )


def _rows_by_id(policy: TreePolicy) -> dict[str, dict[int, np.ndarray]]:
    topo = policy.topology
    out = {}
    for key, arr in policy.params.items():
        ids = topo.inner_ids if key in INNER_KEYS else topo.leaf_ids
        out[key] = {nid: np.array(arr[k]) for k, nid in enumerate(ids)}
    return out


def _stack(policy: TreePolicy, topology: TreeTopology, rows: dict) -> TreePolicy:
    params = {}
    for key, by_id in rows.items():
        ids = topology.inner_ids if key in INNER_KEYS else topology.leaf_ids
        template = policy.params[key]
        if ids:
            params[key] = np.stack([by_id[i] for i in ids])
        else:
            params[key] = np.zeros((0,) + template.shape[1:])
    return TreePolicy(
        topology, params, policy.obs_dim, policy.n_actions, policy.hist_dim,
        policy.normalizer, policy.recurrence, policy.gating,
    )


def split_leaf(policy: TreePolicy, leaf_id: int, rng: Optional[np.random.Generator] = None,
               noise: bool = True) -> TreePolicy:
    """Replace a leaf by an inner node whose two children inherit the leaf's parameters.

    Children get N(0, 1/d) perturbations (d = child depth); the new gate gets
    N(0, 1/d) weights and zero bias. ``noise=False`` zeroes every perturbation,
    leaving the tree's outputs unchanged.
    """
    topo = policy.topology
    if leaf_id not in topo.nodes or not topo.is_leaf(leaf_id):
        raise StructureError(f"node {leaf_id} is not a leaf")
    rng = rng if rng is not None else np.random.default_rng()
    new_topo, left, right = topo.split(leaf_id)
    d = topo.nodes[leaf_id].depth + 1
    sigma = np.sqrt(1.0 / d) if noise else 0.0
    rows = _rows_by_id(policy)
    for key, by_id in rows.items():
        if key in INNER_KEYS:
            shape = policy.params[key].shape[1:]
            if key in ("b", "bh", "bz"):
                by_id[leaf_id] = np.zeros(shape)
            else:
                by_id[leaf_id] = sigma * rng.standard_normal(shape)
        else:
            parent = by_id.pop(leaf_id)
            by_id[left] = parent + sigma * rng.standard_normal(parent.shape)
            by_id[right] = parent + sigma * rng.standard_normal(parent.shape)
    return _stack(policy, new_topo, rows)


def collapse_node(policy: TreePolicy, inner_id: int, keep_child: int) -> TreePolicy:
    """Remove ``inner_id`` and the subtree of its other child; ``keep_child`` moves up."""
    topo = policy.topology
    new_topo = topo.collapse(inner_id, keep_child)
    rows = _rows_by_id(policy)
    for key, by_id in rows.items():
        ids = set(new_topo.inner_ids if key in INNER_KEYS else new_topo.leaf_ids)
        rows[key] = {nid: v for nid, v in by_id.items() if nid in ids}
    return _stack(policy, new_topo, rows)


def leaf_masses(policy: TreePolicy, trajectories: Sequence[Trajectory]) -> dict[int, float]:
    """Average soft path probability of each leaf over every validation step."""
    batch = make_batch(list(trajectories), policy.normalizer)
    out = rollout_batch(policy, batch.z, "soft")
    real = batch.mask.astype(bool)
    mean = out.leaf_probs[real].mean(axis=0)
    return {nid: float(mean[k]) for k, nid in enumerate(policy.topology.leaf_ids)}


def prune_low_probability(policy: TreePolicy, val: Sequence[Trajectory], p_min: float,
                          events: Optional[list] = None) -> TreePolicy:
    """Collapse away leaves whose validation path mass is below ``p_min``, one at a time."""
    if len(val) == 0:
        raise DataError("pruning needs a non-empty validation set")
    while policy.topology.n_leaves > 1:
        masses = leaf_masses(policy, val)
        leaf_id = min(masses, key=lambda nid: (masses[nid], nid))
        if masses[leaf_id] >= p_min:
            break
        topo = policy.topology
        parent_id = topo.nodes[leaf_id].parent
        parent = topo.nodes[parent_id]
        sibling = parent.right if parent.left == leaf_id else parent.left
        policy = collapse_node(policy, parent_id, sibling)
        if events is not None:
            events.append(GrowthEvent("prune", leaf_id, topo.nodes[leaf_id].depth, None, None,
                                      f"mass={masses[leaf_id]:.4g}", sibling))
    return policy


def _auroc(policy, val_batch) -> float:
    score, _, _ = validation_score(policy, val_batch)
    return -np.inf if score is None else score


def grow(
    train: Sequence[Trajectory],
    val: Sequence[Trajectory],
    growth: GrowthConfig = GrowthConfig(),
    training: TrainingConfig = TrainingConfig(),
    rng: Optional[np.random.Generator] = None,
    hist_dim: int = 8,
    recurrence: RecurrenceModel = RecurrenceModel.FIXED_TANH,
    gating: Gating = Gating.OBLIQUE,
    n_actions: Optional[int] = None,
    normalizer: Optional[Normalizer] = None,
) -> GrowthResult:
    if len(train) == 0 or len(val) == 0:
        raise DataError("growth needs non-empty training and validation sets")
    rng = rng if rng is not None else np.random.default_rng(training.seed)
    normalizer = normalizer if normalizer is not None else Normalizer.fit(train)
    if n_actions is None:
        n_actions = int(max(int(tr.actions.max()) for tr in list(train) + list(val))) + 1
    obs_dim = train[0].obs_dim
    val_batch = make_batch(list(val), normalizer)
    events: list[GrowthEvent] = []
    history: list = []
    failures = 0

    def run(pol, scope=None, restart=False) -> TrainResult:
        nonlocal failures
        res = train_fixed_topology(pol, train, val, training, scope=scope, restart=restart, rng=rng)
        failures += int(res.failed)
        history.extend(res.history)
        return res

    policy = initialize_tree(obs_dim, n_actions, hist_dim, recurrence, rng, normalizer, gating,
                             growth.initial_depth, growth.max_depth, training.init_scale)
    policy = run(policy, restart=True).policy
    current = _auroc(policy, val_batch)
    optimal: set[int] = set()
    while True:
        candidates = [nid for nid in policy.topology.leaf_ids if nid not in optimal]
        if not candidates:
            break
        masses = leaf_masses(policy, val)
        leaf_id = max(candidates, key=lambda nid: (masses[nid], -nid))
        depth = policy.topology.nodes[leaf_id].depth
        if depth >= growth.max_depth:
            optimal.add(leaf_id)
            events.append(GrowthEvent("reject", leaf_id, depth, current, None, "max_depth"))
            continue
        snapshot = policy
        candidate = split_leaf(policy, leaf_id, rng)
        candidate = run(candidate, scope=leaf_id).policy
        after = _auroc(candidate, val_batch)
        if after > current + growth.split_margin:
            events.append(GrowthEvent("split", leaf_id, depth, current, after))
            log.info("split leaf %d at depth %d: val AUROC %.4f -> %.4f", leaf_id, depth, current, after)
            policy, current = candidate, after
        else:
            events.append(GrowthEvent("reject", leaf_id, depth, current, after, "no_improvement"))
            policy = snapshot
            optimal.add(leaf_id)

    final = run(policy)
    policy = final.policy
    current = _auroc(policy, val_batch)
    unpruned = policy
    pruned = prune_low_probability(policy, val, growth.prune_threshold, events)
    return GrowthResult(pruned, unpruned, events, _auroc(pruned, val_batch), failures, history)


def replay_topology(events: Sequence[GrowthEvent], initial_depth: int = 2, max_depth: int = 5) -> TreeTopology:
    """Rebuild a topology from a fresh initial tree and the logged accepted splits and prunes."""
    topo = TreeTopology.complete(initial_depth, max_depth)
    for ev in events:
        if ev.event == "split":
            topo, _, _ = topo.split(ev.node_id)
        elif ev.event == "prune":
            parent = topo.nodes[ev.node_id].parent
            topo = topo.collapse(parent, ev.kept_child)
    return topo


def write_events(events: Sequence[GrowthEvent], path) -> None:
    with open(path, "w") as fh:
        for ev in events:
            fh.write(ev.to_json() + "\n")
