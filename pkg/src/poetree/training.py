"""Minibatch Adam training of a policy over a fixed topology."""

from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import Batch, DataError, Trajectory, make_batch
from .metrics import multiclass_auroc
from .objective import LossWeights, batch_objective
from .optim import AdamState, adam_step
from .tree import INNER_KEYS, TreePolicy, random_policy, rollout_batch

log = logging.getLogger(__name__)


@dataclass
class TrainingConfig:
    delta1: float = 1e-2
    delta2: float = 1e-3
    lam: float = 1e-1
    l1_weight: float = 0.0
    # log-linear L1 ramp (start, end) over ``l1_ramp_epochs``; overrides l1_weight
    l1_schedule: Optional[tuple[float, float]] = None
    l1_ramp_epochs: int = 50
    loss_variant: str = "leafwise"
    l1_scope: str = "all"
    learning_rate: float = 1e-3
    batch_size: int = 32
    patience: int = 50  # update iterations without validation improvement
    eval_every: int = 10
    min_delta: float = 1e-3  # smallest validation cross-entropy drop that counts as progress
    min_epochs: int = 5
    max_epochs: int = 200
    restart_epochs: int = 5
    restart_min_decrease: float = 0.05
    max_restarts: int = 2
    init_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if min(self.delta1, self.delta2, self.lam, self.l1_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.patience < 1 or self.eval_every < 1 or self.batch_size < 1:
            raise ValueError("patience, eval_every and batch_size must be >= 1")
        if self.l1_schedule is not None:
            lo, hi = self.l1_schedule
            if lo <= 0 or hi <= 0:
                raise ValueError("L1 schedule endpoints must be positive")

    def l1_at(self, epoch: int) -> float:
        if self.l1_schedule is None:
            return self.l1_weight
        lo, hi = self.l1_schedule
        frac = min(1.0, max(0.0, (epoch - 1) / max(1, self.l1_ramp_epochs - 1)))
        return float(np.exp(np.log(lo) + frac * (np.log(hi) - np.log(lo))))

    def weights(self, epoch: int = 1) -> LossWeights:
        return LossWeights(self.delta1, self.delta2, self.lam, self.l1_at(epoch), self.loss_variant, self.l1_scope)


@dataclass
class EpochRecord:
    epoch: int
    total: float
    action: float
    mse: float
    kl: float
    split: float
    val_auroc: Optional[float]


@dataclass
class TrainResult:
    policy: TreePolicy
    history: list[EpochRecord] = field(default_factory=list)
    best_val_auroc: Optional[float] = None
    final_val_auroc: Optional[float] = None
    final_policy: Optional[TreePolicy] = None
    restarts: int = 0
    failed: bool = False
    n_updates: int = 0
    initial_loss: Optional[float] = None


HISTORY_COLUMNS = ("epoch", "total", "action", "mse", "kl", "split", "val_auroc")


def write_history_csv(history: Sequence[EpochRecord], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for rec in history:
            writer.writerow({k: ("" if v is None else v) for k, v in asdict(rec).items()})


def scope_masks(policy: TreePolicy, subtree_root: Optional[int]) -> Optional[dict]:
    """Row masks selecting the parameters that belong to a subtree (``None`` = everything)."""
    if subtree_root is None:
        return None
    topo = policy.topology
    members = set(topo.subtree(subtree_root))
    inner = np.array([nid in members for nid in topo.inner_ids], dtype=bool)
    leaf = np.array([nid in members for nid in topo.leaf_ids], dtype=bool)
    return {key: (inner if key in INNER_KEYS else leaf) for key in policy.params}


def validation_score(policy: TreePolicy, batch: Batch) -> tuple[Optional[float], np.ndarray, np.ndarray]:
    """Soft-mode AUROC over every real step of ``batch``; also returns the flat probs and labels."""
    out = rollout_batch(policy, batch.z, "soft")
    real = batch.mask.astype(bool)
    probs = out.action_dist[real]
    labels = batch.actions[real]
    return multiclass_auroc(probs, labels), probs, labels


def _sub_batch(batch: Batch, idx: np.ndarray) -> Batch:
    lengths = batch.lengths[idx]
    T = int(lengths.max())
    return Batch(batch.z[idx, :T], batch.actions[idx, :T], batch.mask[idx, :T], lengths)


def train_fixed_topology(
    policy: TreePolicy,
    train: Sequence[Trajectory],
    val: Sequence[Trajectory],
    config: TrainingConfig = TrainingConfig(),
    scope: Optional[int] = None,
    restart: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> TrainResult:
    """Optimize parameters until validation AUROC stalls for ``patience`` updates.

    ``scope`` names a subtree root; parameters outside it stay frozen. With
    ``restart`` the run is reinitialized when the training loss has not
    dropped by ``restart_min_decrease`` after ``restart_epochs`` epochs.
    Returns the best-validation snapshot.
    """
    if len(train) == 0 or len(val) == 0:
        raise DataError("training and validation sets must be non-empty")
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    train_batch = make_batch(list(train), policy.normalizer)
    val_batch = make_batch(list(val), policy.normalizer)
    masks = scope_masks(policy, scope)
    n = train_batch.size

    n_attempts = config.max_restarts + 1 if restart else 1
    attempts: list[TrainResult] = []
    current = policy
    for attempt in range(n_attempts):
        if attempt > 0:
            current = random_policy(
                policy.topology, policy.obs_dim, policy.n_actions, policy.hist_dim,
                policy.recurrence, policy.gating, policy.normalizer, config.init_scale, rng,
            )
        last = attempt == n_attempts - 1
        result, stalled = _optimize(current, train_batch, val_batch, config, masks, rng, n, restart and not last)
        result.restarts = attempt
        if not stalled:
            # the final attempt trains to convergence even if it trips the rule
            result.failed = restart and _stalled(result, config)
            if result.failed:
                log.warning("training loss stalled in every attempt; keeping the last run")
            return result
        attempts.append(result)
        log.info("restart %d: training loss did not decrease enough", attempt + 1)
    raise AssertionError("unreachable")


def _stalled(result: TrainResult, config: TrainingConfig) -> bool:
    if len(result.history) < config.restart_epochs:
        return False
    epoch_loss = result.history[config.restart_epochs - 1].total
    return epoch_loss > (1.0 - config.restart_min_decrease) * result.initial_loss


def _optimize(policy, train_batch, val_batch, config, masks, rng, n, restart):
    state = AdamState()
    weights = config.weights(1)
    initial = batch_objective(policy, train_batch, weights, need_grad=False).loss.total
    best_auroc, _, _ = validation_score(policy, val_batch)
    best_key = _score_key(best_auroc, policy, val_batch, weights)
    best_loss = -best_key[1]
    best_policy = policy
    history: list[EpochRecord] = []
    updates = since = 0
    last_auroc = best_auroc
    converged = False
    for epoch in range(1, config.max_epochs + 1):
        weights = config.weights(epoch)
        sums = np.zeros(5)
        n_batches = 0
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            mb = _sub_batch(train_batch, order[start : start + config.batch_size])
            res = batch_objective(policy, mb, weights)
            grads = res.grads
            if masks is not None:
                grads = {k: np.where(_expand(masks[k], g.ndim), g, 0.0) for k, g in grads.items()}
            params, state = adam_step(dict(policy.params), grads, state, config.learning_rate)
            policy = policy.with_params(params)
            lb = res.loss
            sums += (lb.total, lb.action_loss, lb.evolution_mse, lb.evolution_kl, lb.split_loss)
            n_batches += 1
            updates += 1
            if updates % config.eval_every == 0:
                last_auroc, _, _ = validation_score(policy, val_batch)
                key = _score_key(last_auroc, policy, val_batch, weights)
                since += config.eval_every
                if key[0] > best_key[0]:
                    since = 0
                if key > best_key:
                    best_key, best_policy, best_auroc = key, policy, last_auroc
                if -key[1] < best_loss - config.min_delta:
                    best_loss, since = -key[1], 0
                if since >= config.patience and epoch >= config.min_epochs:
                    converged = True
                    break
        means = sums / max(n_batches, 1)
        history.append(EpochRecord(epoch, *map(float, means), last_auroc))
        if restart and epoch == config.restart_epochs and means[0] > (1.0 - config.restart_min_decrease) * initial:
            return TrainResult(best_policy, history, best_auroc, last_auroc, policy, n_updates=updates, initial_loss=initial), True
        if converged:
            break
    return TrainResult(best_policy, history, best_auroc, last_auroc, policy, n_updates=updates, initial_loss=initial), False


def _score_key(auroc, policy, val_batch, weights):
    # AUROC first; validation cross-entropy breaks exact ties (e.g. a saturated AUROC)
    loss = batch_objective(policy, val_batch, weights, need_grad=False).loss.action_loss
    return (-np.inf if auroc is None else round(auroc, 12), -loss)


def _expand(mask: np.ndarray, ndim: int) -> np.ndarray:
    return mask.reshape(mask.shape + (1,) * (ndim - 1))
