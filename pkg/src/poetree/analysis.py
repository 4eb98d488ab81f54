"""Behavioral analytics and action-matching evaluation of a trained policy."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .data import DataError, Trajectory, make_batch
from .metrics import auprc, auroc, brier
from .tree import TreePolicy, forward_step, leaf_action_table, rollout_batch

REL_ERROR_FLOOR = 1e-6


def policy_confidence(policy: TreePolicy, h, z_raw) -> np.ndarray:
    """Path-weighted mixture of leaf action distributions."""
    return forward_step(policy, h, z_raw).action_dist


def entropy(p, axis=-1) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, -p * np.log(p), 0.0)
    return terms.sum(axis=axis)


def path_entropy(policy: TreePolicy, h, z_raw) -> float:
    return float(entropy(forward_step(policy, h, z_raw).leaf_path_probs))


def leaf_entropy(policy: TreePolicy) -> float:
    """Average entropy of the leaves' action distributions."""
    return float(entropy(leaf_action_table(policy), axis=1).mean())


@dataclass
class AnomalyFlags:
    predicted: np.ndarray
    confidence: np.ndarray
    anomalous: np.ndarray
    corrected: np.ndarray


def anomaly_flags(probs, actions, threshold: float = 0.9) -> AnomalyFlags:
    """Confident predictions contradicted by the demonstration, and one-step corrections."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    actions = np.asarray(actions, dtype=int)
    predicted = probs.argmax(axis=1)
    confidence = probs.max(axis=1)
    anomalous = (confidence >= threshold) & (predicted != actions)
    corrected = np.zeros_like(anomalous)
    corrected[:-1] = anomalous[:-1] & (actions[1:] == predicted[:-1])
    return AnomalyFlags(predicted, confidence, anomalous, corrected)


def _rollouts(policy: TreePolicy, trajectories: Sequence[Trajectory]):
    trajectories = list(trajectories)
    if not trajectories:
        raise DataError("no trajectories given")
    batch = make_batch(trajectories, policy.normalizer)
    return batch, rollout_batch(policy, batch.z, "soft")


def detect_anomalies(policy: TreePolicy, trajectories: Sequence[Trajectory],
                     threshold: float = 0.9) -> list[AnomalyFlags]:
    _, roll = _rollouts(policy, trajectories)
    return [anomaly_flags(roll.action_dist[b, : len(tr)], tr.actions, threshold)
            for b, tr in enumerate(trajectories)]


def change_bound(z: np.ndarray, mask: np.ndarray) -> float:
    """Mean minus one standard deviation of one-step observation change norms."""
    d = np.linalg.norm(z[:, 1:] - z[:, :-1], axis=2)
    pairs = (mask[:, 1:] * mask[:, :-1]).astype(bool)
    if not pairs.any():
        return -np.inf
    vals = d[pairs]
    return float(vals.mean() - vals.std())


def low_value_flags(z, z_pred, actions, bound: float, active=(1,)) -> np.ndarray:
    """Flags for one trajectory of normalized observations ``z`` (T, D).

    ``z_pred[t]`` is the policy's prediction of ``z[t + 1]``.
    """
    z = np.asarray(z, dtype=float)
    z_pred = np.asarray(z_pred, dtype=float)
    actions = np.asarray(actions, dtype=int)
    flags = np.zeros(len(actions), dtype=bool)
    if len(actions) < 2:
        return flags
    realized = np.linalg.norm(z[1:] - z[:-1], axis=1)
    foreseen = np.linalg.norm(z_pred[:-1] - z[:-1], axis=1)
    flags[:-1] = np.isin(actions[:-1], list(active)) & (realized < bound) & (foreseen < bound)
    return flags


def low_value_actions(policy: TreePolicy, trajectories: Sequence[Trajectory], active=(1,)) -> list[np.ndarray]:
    batch, roll = _rollouts(policy, trajectories)
    bound = change_bound(batch.z, batch.mask)
    return [low_value_flags(batch.z[b, : len(tr)], roll.z_pred[b, : len(tr)], tr.actions, bound, active)
            for b, tr in enumerate(trajectories)]


@dataclass
class EvaluationReport:
    accuracy: float
    auroc: Optional[float]
    auprc: Optional[float]
    brier: Optional[float]
    evolution_relative_error: Optional[float]
    n_trajectories: int
    n_steps: int
    anomaly_rate: float
    low_value_rate: float
    confidence: dict = field(default_factory=dict)  # id -> per-step confidence
    steps: list = field(default_factory=list)  # per-step rows for CSV
    hard_accuracy: Optional[float] = None  # argmax action along a hard (single-path) rollout

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("steps")
        d.pop("confidence")
        return d

    def to_json(self, include_series: bool = True) -> str:
        d = self.summary()
        if include_series:
            d["confidence"] = self.confidence
        return json.dumps(d, indent=2, sort_keys=True)


STEP_COLUMNS = ("id", "t", "action", "predicted", "confidence", "anomalous", "corrected", "low_value")


def write_step_csv(report: EvaluationReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=STEP_COLUMNS)
        writer.writeheader()
        writer.writerows(report.steps)


def classification_metrics(probs, labels, decisions) -> dict:
    """Accuracy for any K; AUROC, AUPRC and Brier from the positive class when K = 2."""
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    out = {"accuracy": float(np.mean(np.asarray(decisions) == labels)),
           "auroc": None, "auprc": None, "brier": None}
    if probs.shape[1] == 2:
        pos = probs[:, 1]
        out.update(auroc=auroc(pos, labels == 1), auprc=auprc(pos, labels == 1), brier=brier(pos, labels == 1))
    return out


def evaluate(policy: TreePolicy, trajectories: Sequence[Trajectory], anomaly_threshold: float = 0.9,
             active=(1,)) -> EvaluationReport:
    """Metrics over every step of soft rollouts.

    The decision at each step is the action of the maximum-probability leaf;
    probability-based metrics use the path-weighted mixture.
    """
    trajectories = list(trajectories)
    batch, roll = _rollouts(policy, trajectories)
    real = batch.mask.astype(bool)
    table = leaf_action_table(policy)
    decisions = table[roll.leaf_probs.argmax(axis=2)].argmax(axis=2)
    metrics = classification_metrics(roll.action_dist[real], batch.actions[real], decisions[real])
    hard = rollout_batch(policy, batch.z, "hard").action_dist.argmax(axis=2)
    hard_accuracy = float(np.mean(hard[real] == batch.actions[real]))

    # next-step prediction error in normalized space
    pairs = real[:, 1:] & real[:, :-1]
    err = None
    if pairs.any():
        num = np.linalg.norm(batch.z[:, 1:] - roll.z_pred[:, :-1], axis=2)
        den = np.maximum(np.linalg.norm(batch.z[:, 1:], axis=2), REL_ERROR_FLOOR)
        err = float((num / den)[pairs].mean())

    bound = change_bound(batch.z, batch.mask)
    confidence, steps = {}, []
    n_anom = n_low = 0
    for b, tr in enumerate(trajectories):
        T = len(tr)
        flags = anomaly_flags(roll.action_dist[b, :T], tr.actions, anomaly_threshold)
        low = low_value_flags(batch.z[b, :T], roll.z_pred[b, :T], tr.actions, bound, active)
        confidence[tr.id] = [float(v) for v in flags.confidence]
        n_anom += int(flags.anomalous.sum())
        n_low += int(low.sum())
        for t in range(T):
            steps.append({"id": tr.id, "t": t + 1, "action": int(tr.actions[t]),
                          "predicted": int(decisions[b, t]), "confidence": float(flags.confidence[t]),
                          "anomalous": int(flags.anomalous[t]), "corrected": int(flags.corrected[t]),
                          "low_value": int(low[t])})
    n_steps = int(real.sum())
    return EvaluationReport(
        metrics["accuracy"], metrics["auroc"], metrics["auprc"], metrics["brier"], err,
        len(trajectories), n_steps, n_anom / n_steps, n_low / n_steps, confidence, steps, hard_accuracy,
    )
