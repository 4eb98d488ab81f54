"""Training objective and its exact reverse-mode gradient.

The batch objective is

    total = action + delta1 * mse + delta2 * kl + split + l1_weight * l1

where ``action`` is the path-weighted leaf cross-entropy averaged per
timestep, ``mse``/``kl`` are the evolution terms averaged per transition,
``split`` is the balanced-routing regularizer over every step input of the
batch, and ``l1`` sums absolute gating weights. Per-trajectory averages are
then averaged over the batch, so a one-trajectory batch gives that
trajectory's loss.

The backward pass is written by hand: gates are differentiated through
log path probabilities, and histories are back-propagated through time over
the full unroll.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import Batch, DataError, Trajectory, make_batch
from .tree import (
    INNER_KEYS,
    LOG_EPS,
    Gating,
    RecurrenceModel,
    TreePolicy,
    evaluate_gates,
    gate_backward,
    leaf_history_pre,
    log_softmax,
    softmax,
)

ALPHA_EPS = 1e-6
LOG_FLOOR = np.log(LOG_EPS)
LOSS_VARIANTS = ("leafwise", "mixture", "max_leaf")
L1_SCOPES = ("all", "observation")


class NumericError(FloatingPointError):
    """Raised when a gradient entry is not finite."""


@dataclass
class LossWeights:
    delta1: float = 1e-2
    delta2: float = 1e-3
    lam: float = 1e-1
    l1_weight: float = 0.0
    loss_variant: str = "leafwise"
    l1_scope: str = "all"  # "observation" leaves history gate weights unpenalized

    def __post_init__(self):
        if min(self.delta1, self.delta2, self.lam, self.l1_weight) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"loss_variant must be one of {LOSS_VARIANTS}")
        if self.l1_scope not in L1_SCOPES:
            raise ValueError(f"l1_scope must be one of {L1_SCOPES}")


@dataclass
class LossBreakdown:
    action_loss: float
    evolution_mse: float
    evolution_kl: float
    split_loss: float
    l1_loss: float
    total: float

    def as_dict(self) -> dict:
        return {
            "total": self.total, "action": self.action_loss, "mse": self.evolution_mse,
            "kl": self.evolution_kl, "split": self.split_loss, "l1": self.l1_loss,
        }


# --------------------------------------------------------------------------
# stand-alone loss terms


def _clamped_log(p):
    return np.maximum(np.log(np.maximum(p, 1e-300)), LOG_FLOOR)


def action_loss(policy: TreePolicy, h, z, target) -> float:
    """Path-weighted cross-entropy of every leaf against a one-hot target (normalized ``z``)."""
    target = np.asarray(target, dtype=float)
    if target.shape != (policy.n_actions,) or not np.isclose(target.sum(), 1.0) or set(np.unique(target)) - {0.0, 1.0}:
        raise DataError(f"target must be one-hot of length {policy.n_actions}")
    x = np.concatenate([np.asarray(h, float), np.asarray(z, float)])[None]
    P = evaluate_gates(policy, x).leaf_probs(policy.topology)[0]
    la = np.maximum(log_softmax(policy.params["theta_a"], axis=1), LOG_FLOOR)
    return float(-P @ (la @ target))


def evolution_loss(policy: TreePolicy, h_t, z_t, z_next) -> dict:
    """Squared error of the predicted next observation and action-consistency KL.

    All observations are normalized. The KL compares the policy at
    ``(h_{t+1}, z_{t+1})`` with the policy at ``(h_{t+1}, z_pred)``.
    """
    from .tree import step_batch

    h_t = np.asarray(h_t, float)[None]
    z_t = np.asarray(z_t, float)[None]
    z_next = np.asarray(z_next, float)[None]
    out = step_batch(policy, h_t, z_t)
    mse = float(((z_next - out.z_pred) ** 2).sum())
    q = step_batch(policy, out.h_next, z_next).action_dist[0]
    r = step_batch(policy, out.h_next, out.z_pred).action_dist[0]
    kl = float(np.sum(q * (_clamped_log(q) - _clamped_log(r))))
    return {"mse": mse, "kl": max(kl, 0.0)}


def _split_alpha(policy: TreePolicy, p_all: np.ndarray, weights: np.ndarray):
    topo = policy.topology
    s = weights @ p_all[:, topo.inner_columns]
    r = weights @ p_all[:, topo.right_child_columns]
    raw = r / np.maximum(s, 1e-300)
    return raw, np.clip(raw, ALPHA_EPS, 1.0 - ALPHA_EPS), s, r


def split_regularizer(policy: TreePolicy, x: np.ndarray, lam: float) -> float:
    """Balanced-split penalty over a set of step inputs ``x`` (N, M+D)."""
    x = np.atleast_2d(np.asarray(x, float))
    if len(x) == 0:
        raise DataError("split regularizer needs at least one input")
    if policy.topology.n_inner == 0 or lam == 0:
        return 0.0
    ev = evaluate_gates(policy, x)
    _, alpha, _, _ = _split_alpha(policy, ev.p, np.ones(len(x)))
    decay = 2.0 ** (-policy.topology.inner_depths)
    return float(-lam * np.sum(decay * (0.5 * np.log(alpha) + 0.5 * np.log(1 - alpha))))


def l1_masks(policy: TreePolicy, scope: str = "all") -> dict[str, np.ndarray]:
    """0/1 masks over the gating weights that the L1 penalty covers."""
    p = policy.params
    if policy.gating is Gating.OBLIQUE:
        mask = np.ones_like(p["w"])
        if scope == "observation":
            mask[:, : policy.hist_dim] = 0.0
        return {"w": mask}
    return {"wh": np.full_like(p["wh"], float(scope == "all")), "wz": np.ones_like(p["wz"])}


def l1_penalty(policy: TreePolicy, scope: str = "all") -> float:
    return float(sum(np.abs(policy.params[k] * m).sum() for k, m in l1_masks(policy, scope).items()))


# --------------------------------------------------------------------------
# batched objective with gradients


@dataclass
class _StepCache:
    h: np.ndarray
    z: np.ndarray
    gates: object
    P: np.ndarray
    pi: np.ndarray
    hist_pre: np.ndarray
    hist: np.ndarray
    h_next: np.ndarray
    z_pred: np.ndarray
    kl_gates: object = None
    kl_P: np.ndarray = None
    kl_pi: np.ndarray = None


@dataclass
class ObjectiveResult:
    loss: LossBreakdown
    grads: dict = field(default_factory=dict)
    kl_targets: np.ndarray = None


def _zeros_like(params) -> dict:
    return {k: np.zeros_like(v, dtype=float) for k, v in params.items()}


def batch_objective(
    policy: TreePolicy, batch: Batch, weights: LossWeights, need_grad: bool = True,
    kl_targets: np.ndarray = None,
) -> ObjectiveResult:
    """Mean loss over ``batch`` and, optionally, its gradient w.r.t. every parameter.

    The KL term's reference distribution (the policy at the true next
    observation) carries no gradient. ``kl_targets`` (B, T, K) pins it to
    given values, which lets finite differences see the same function the
    analytic gradient differentiates.
    """
    p = policy.params
    topo = policy.topology
    B, T, D = batch.z.shape
    M = policy.hist_dim
    mask = batch.mask
    lengths = mask.sum(axis=1)
    if np.any(lengths < 1):
        raise DataError("every trajectory needs at least one step")

    la_raw = log_softmax(p["theta_a"], axis=1)
    la = np.maximum(la_raw, LOG_FLOOR)
    la_clamped = la_raw < LOG_FLOOR
    sa = softmax(p["theta_a"], axis=1)
    zt = np.tanh(p["theta_z"])
    softmax_hist = policy.recurrence is RecurrenceModel.FIXED_SOFTMAX

    # per-(b, t) weights of each averaged term
    w_act = mask / lengths[:, None] / B
    n_trans = np.maximum(lengths - 1, 1)
    w_evo = np.zeros((B, T))
    w_evo[:, :-1] = mask[:, 1:] / n_trans[:, None] / B

    caches: list[_StepCache] = []
    h = np.zeros((B, M))
    act_terms = np.zeros((B, T))
    mse_terms = np.zeros((B, T))
    rows = np.arange(B)
    for t in range(T):
        z = batch.z[:, t]
        ev = evaluate_gates(policy, np.concatenate([h, z], axis=1))
        P = ev.p[:, topo.leaf_columns]
        pi = P @ sa
        a = batch.actions[:, t]
        if weights.loss_variant == "leafwise":
            act_terms[:, t] = -(P * la[:, a].T).sum(axis=1)
        elif weights.loss_variant == "mixture":
            act_terms[:, t] = -_clamped_log(pi[rows, a])
        else:
            act_terms[:, t] = -la[np.argmax(P, axis=1), a]
        pre = leaf_history_pre(policy, h, z)
        hist = softmax(pre, axis=2) if softmax_hist else np.tanh(pre)
        h_next = np.einsum("bl,blm->bm", P, hist)
        z_pred = P @ zt
        cache = _StepCache(h, z, ev, P, pi, pre, hist, h_next, z_pred)
        if t < T - 1:
            mse_terms[:, t] = ((batch.z[:, t + 1] - z_pred) ** 2).sum(axis=1)
            if weights.delta2 > 0:
                kev = evaluate_gates(policy, np.concatenate([h_next, z_pred], axis=1))
                cache.kl_gates = kev
                cache.kl_P = kev.p[:, topo.leaf_columns]
                cache.kl_pi = cache.kl_P @ sa
        caches.append(cache)
        h = h_next

    if kl_targets is None:
        kl_targets = np.stack([c.pi for c in caches], axis=1)
    kl_terms = np.zeros((B, T))
    if weights.delta2 > 0:
        for t in range(T - 1):
            q = kl_targets[:, t + 1]
            kl_terms[:, t] = (q * (_clamped_log(q) - _clamped_log(caches[t].kl_pi))).sum(axis=1)

    action_val = float((w_act * act_terms).sum())
    mse_val = float((w_evo * mse_terms).sum())
    kl_val = float((w_evo * kl_terms).sum())

    split_val = 0.0
    split_coef = None
    if weights.lam > 0 and topo.n_inner > 0:
        p_all = np.stack([c.gates.p for c in caches], axis=1)  # (B, T, N)
        flat_p = p_all.reshape(B * T, -1)
        raw, alpha, s, r = _split_alpha(policy, flat_p, mask.reshape(-1))
        decay = 2.0 ** (-topo.inner_depths)
        split_val = float(-weights.lam * np.sum(decay * (0.5 * np.log(alpha) + 0.5 * np.log(1 - alpha))))
        d_alpha = -weights.lam * decay * 0.5 * (1.0 / alpha - 1.0 / (1.0 - alpha))
        d_alpha = np.where((raw > ALPHA_EPS) & (raw < 1.0 - ALPHA_EPS), d_alpha, 0.0)
        s_safe = np.maximum(s, 1e-300)
        split_coef = np.zeros(len(topo.node_ids))
        np.add.at(split_coef, topo.right_child_columns, d_alpha / s_safe)
        np.add.at(split_coef, topo.inner_columns, -d_alpha * r / s_safe**2)

    l1_val = l1_penalty(policy, weights.l1_scope)
    total = action_val + weights.delta1 * mse_val + weights.delta2 * kl_val + split_val + weights.l1_weight * l1_val
    loss = LossBreakdown(action_val, mse_val, kl_val, split_val, l1_val, total)
    if not need_grad:
        return ObjectiveResult(loss, kl_targets=kl_targets)

    grads = _zeros_like(p)
    d_la = np.zeros_like(la)
    d_sa = np.zeros_like(sa)
    d_zt = np.zeros_like(zt)
    d_h_next = np.zeros((B, M))
    for t in range(T - 1, -1, -1):
        c = caches[t]
        a = batch.actions[:, t]
        d_z_pred = np.zeros((B, D))

        if t < T - 1:
            we = w_evo[:, t]
            d_z_pred += 2.0 * weights.delta1 * we[:, None] * (c.z_pred - batch.z[:, t + 1])
            if weights.delta2 > 0:
                q = kl_targets[:, t + 1]
                r_pi = c.kl_pi
                d_log_r = -weights.delta2 * we[:, None] * q * (r_pi > LOG_EPS)
                d_r = d_log_r / np.maximum(r_pi, 1e-300)
                d_sa += c.kl_P.T @ d_r
                d_kP = d_r @ sa.T
                d_log_p = np.zeros_like(c.kl_gates.p)
                d_log_p[:, topo.leaf_columns] = d_kP * c.kl_P
                dx = gate_backward(policy, c.kl_gates, d_log_p, grads)
                d_h_next += dx[:, :M]
                d_z_pred += dx[:, M:]

        d_P = np.zeros_like(c.P)
        # history mixture
        d_P += np.einsum("bm,blm->bl", d_h_next, c.hist)
        d_hist = c.P[:, :, None] * d_h_next[:, None, :]
        # evolution prediction mixture
        d_P += d_z_pred @ zt.T
        d_zt += c.P.T @ d_z_pred
        # action loss
        wa = w_act[:, t]
        if weights.loss_variant == "leafwise":
            d_P += -wa[:, None] * la[:, a].T
            np.add.at(d_la.T, a, -(wa[:, None] * c.P))
        elif weights.loss_variant == "mixture":
            pa = c.pi[rows, a]
            d_pa = np.where(pa > LOG_EPS, -wa / np.maximum(pa, 1e-300), 0.0)
            d_pi = np.zeros_like(c.pi)
            d_pi[rows, a] = d_pa
            d_P += d_pi @ sa.T
            d_sa += c.P.T @ d_pi
        else:
            lmax = np.argmax(c.P, axis=1)
            np.add.at(d_la, (lmax, a), -wa)

        # leaf history model
        if softmax_hist:
            d_pre = c.hist * (d_hist - (d_hist * c.hist).sum(axis=2, keepdims=True))
        else:
            d_pre = d_hist * (1.0 - c.hist**2)
        grads["theta_h"] += d_pre.sum(axis=0)
        d_h = np.zeros((B, M))
        kind = policy.recurrence.hist_kind
        if kind == "vec":
            grads["theta_r"] += (d_pre * c.h[:, None, :]).sum(axis=0)
            d_h += (d_pre * p["theta_r"][None]).sum(axis=1)
        elif kind == "mat":
            grads["theta_r"] += np.einsum("blm,bn->lmn", d_pre, c.h)
            d_h += np.einsum("blm,lmn->bn", d_pre, p["theta_r"])
        if policy.recurrence.uses_obs:
            grads["theta_f"] += np.einsum("blm,bd->lmd", d_pre, c.z)

        d_log_p = np.zeros_like(c.gates.p)
        d_log_p[:, topo.leaf_columns] = d_P * c.P
        if split_coef is not None:
            d_log_p += mask[:, t][:, None] * split_coef[None, :] * c.gates.p
        dx = gate_backward(policy, c.gates, d_log_p, grads)
        d_h += dx[:, :M]
        d_h_next = d_h

    d_la = np.where(la_clamped, 0.0, d_la)
    grads["theta_a"] += d_la - sa * d_la.sum(axis=1, keepdims=True)
    grads["theta_a"] += sa * (d_sa - (d_sa * sa).sum(axis=1, keepdims=True))
    grads["theta_z"] += d_zt * (1.0 - zt**2)
    if weights.l1_weight > 0:
        for key, mask in l1_masks(policy, weights.l1_scope).items():
            grads[key] += weights.l1_weight * mask * np.sign(p[key])
    check_finite(policy, grads)
    return ObjectiveResult(loss, grads, kl_targets)


def check_finite(policy: TreePolicy, grads: dict) -> None:
    topo = policy.topology
    for key, g in grads.items():
        bad = np.argwhere(~np.isfinite(g))
        if len(bad):
            row = int(bad[0][0])
            ids = topo.inner_ids if key in INNER_KEYS else topo.leaf_ids
            raise NumericError(f"non-finite gradient for {key!r} at node {ids[row]} (index {tuple(bad[0])})")


def trajectory_loss(policy: TreePolicy, trajectory: Trajectory, weights: LossWeights) -> LossBreakdown:
    batch = make_batch([trajectory], policy.normalizer)
    return batch_objective(policy, batch, weights, need_grad=False).loss


def compute_gradients(policy: TreePolicy, trajectories: Sequence[Trajectory], weights: LossWeights) -> dict:
    if len(trajectories) == 0:
        raise DataError("gradient batch is empty")
    batch = make_batch(list(trajectories), policy.normalizer)
    return batch_objective(policy, batch, weights).grads
