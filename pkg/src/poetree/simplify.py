"""Per-timestep axis-aligned explanations of a trained recurrent tree.

A history h_t is folded into every gate's bias, each gate keeps only its
largest-magnitude observation weight, and the resulting single-feature tests
are expressed in raw observation units. Branches that can never be reached
(out-of-range thresholds, contradictions with an ancestor, negligible
validation mass) are then removed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .data import Normalizer, Trajectory, make_batch
from .tree import (
    Gating,
    StructureError,
    TreePolicy,
    TreeTopology,
    leaf_action_table,
    log_sigmoid,
    rollout_batch,
    sigmoid,
)


def soft_and_gate(w, b, x) -> float:
    """Product of per-dimension sigmoids, a soft conjunction of axis-aligned tests."""
    w, b, x = (np.asarray(v, dtype=float) for v in (w, b, x))
    if not w.shape == b.shape == x.shape:
        raise StructureError(f"soft-AND needs matching shapes, got {w.shape}, {b.shape}, {x.shape}")
    return float(np.exp(log_sigmoid(x * w + b).sum()))


@dataclass(frozen=True)
class MarginalTree:
    """Observation-only view of a tree at a fixed history.

    For oblique gates ``b_prime = b + w_h . h``. For soft-AND gates the
    history factor is constant and kept as ``log_hist``.
    """

    topology: TreeTopology
    gating: Gating
    w_z: np.ndarray  # (n_inner, D)
    b_prime: np.ndarray  # (n_inner,) oblique, (n_inner, D) soft-AND
    leaf_actions: np.ndarray  # (n_leaves, K)
    normalizer: Normalizer
    log_hist: Optional[np.ndarray] = None

    def gate_probabilities(self, z: np.ndarray) -> np.ndarray:
        """Right-branch probabilities for normalized observations (B, D) -> (B, n_inner)."""
        z = np.atleast_2d(z)
        if self.gating is Gating.OBLIQUE:
            return sigmoid(z @ self.w_z.T + self.b_prime)
        return np.exp(self.log_hist + log_sigmoid(z[:, None, :] * self.w_z[None] + self.b_prime[None]).sum(axis=2))

    def leaf_probabilities(self, z: np.ndarray) -> np.ndarray:
        g = np.clip(self.gate_probabilities(z), 1e-300, 1.0 - 1e-16)
        right, left = self.topology.routing
        log_p = np.log(g) @ right.T + np.log1p(-g) @ left.T
        return np.exp(log_p)[:, self.topology.leaf_columns]

    def action_distribution(self, z: np.ndarray) -> np.ndarray:
        return self.leaf_probabilities(z) @ self.leaf_actions


def marginalize_history(policy: TreePolicy, h) -> MarginalTree:
    h = np.asarray(h, dtype=float)
    if h.shape != (policy.hist_dim,):
        raise StructureError(f"history has shape {h.shape}, expected ({policy.hist_dim},)")
    p = policy.params
    M = policy.hist_dim
    actions = leaf_action_table(policy)
    if policy.gating is Gating.OBLIQUE:
        w = p["w"]
        return MarginalTree(policy.topology, policy.gating, w[:, M:].copy(), p["b"] + w[:, :M] @ h,
                            actions, policy.normalizer)
    log_hist = log_sigmoid(p["wh"] @ h + p["bh"])
    return MarginalTree(policy.topology, policy.gating, p["wz"].copy(), p["bz"].copy(),
                        actions, policy.normalizer, log_hist)


@dataclass(frozen=True)
class AxisNode:
    """Inner node: go right iff ``z[feature] > threshold`` (direction ">") or ``<``."""

    id: int
    feature: int
    threshold: float  # raw units
    threshold_normalized: float
    direction: str
    left: int
    right: int
    degenerate: bool = False
    constant_right: bool = False  # branch taken by a degenerate node

    def goes_right(self, z_raw) -> bool:
        if self.degenerate:
            return self.constant_right
        v = z_raw[self.feature]
        return bool(v > self.threshold) if self.direction == ">" else bool(v < self.threshold)


@dataclass(frozen=True)
class AxisLeaf:
    id: int
    action: int
    probability: float
    distribution: tuple[float, ...]


@dataclass
class AxisAlignedTree:
    root: int
    nodes: dict  # id -> AxisNode | AxisLeaf
    timestep: Optional[int] = None
    history: Optional[np.ndarray] = None
    notes: list[str] = field(default_factory=list)

    @property
    def leaf_ids(self) -> list[int]:
        return sorted(nid for nid in self._reachable() if isinstance(self.nodes[nid], AxisLeaf))

    @property
    def inner_ids(self) -> list[int]:
        return sorted(nid for nid in self._reachable() if isinstance(self.nodes[nid], AxisNode))

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    @property
    def degenerate_ids(self) -> list[int]:
        return [nid for nid in self.inner_ids if self.nodes[nid].degenerate]

    def _reachable(self) -> list[int]:
        out, stack = [], [self.root]
        while stack:
            nid = stack.pop()
            out.append(nid)
            node = self.nodes[nid]
            if isinstance(node, AxisNode):
                stack.extend((node.left, node.right))
        return out

    def decide(self, z_raw) -> int:
        """Leaf id reached by a hard traversal of raw observation ``z_raw``."""
        z_raw = np.asarray(z_raw, dtype=float)
        nid = self.root
        while isinstance(self.nodes[nid], AxisNode):
            node = self.nodes[nid]
            nid = node.right if node.goes_right(z_raw) else node.left
        return nid

    def predict(self, z_raw) -> int:
        return self.nodes[self.decide(z_raw)].action

    def leaf_masses(self, observations) -> dict[int, float]:
        obs = np.atleast_2d(np.asarray(observations, dtype=float))
        counts = {nid: 0 for nid in self.leaf_ids}
        for z in obs:
            counts[self.decide(z)] += 1
        n = max(len(obs), 1)
        return {nid: c / n for nid, c in counts.items()}

    def to_dict(self) -> dict:
        nodes = []
        for nid in sorted(self._reachable()):
            node = self.nodes[nid]
            if isinstance(node, AxisNode):
                nodes.append({"id": nid, "kind": "inner", "feature": node.feature,
                              "threshold": node.threshold, "direction": node.direction,
                              "left": node.left, "right": node.right, "degenerate": node.degenerate})
            else:
                nodes.append({"id": nid, "kind": "leaf", "action": node.action,
                              "probability": node.probability, "distribution": list(node.distribution)})
        return {"root": self.root, "timestep": self.timestep, "nodes": nodes, "notes": list(self.notes)}


def _axis_tree(marginal: MarginalTree, residual: Optional[np.ndarray], timestep, h) -> AxisAlignedTree:
    topo = marginal.topology
    norm = marginal.normalizer
    nodes: dict = {}
    notes = []
    for k, nid in enumerate(topo.inner_ids):
        w = marginal.w_z[k]
        topo_node = topo.nodes[nid]
        if marginal.gating is Gating.OBLIQUE:
            bias = float(marginal.b_prime[k])
        else:
            bias = None
        i = int(np.argmax(np.abs(w)))
        w_max = float(w[i])
        if bias is None:
            # soft-AND: the strongest per-dimension factor carries the test
            bias = float(marginal.b_prime[k][i])
        elif residual is not None:
            mask = np.ones(len(w), dtype=bool)
            mask[i] = False
            bias += float(w[mask] @ residual[mask])
        if w_max == 0.0:
            nodes[nid] = AxisNode(nid, 0, float("nan"), float("nan"), ">", topo_node.left, topo_node.right,
                                  degenerate=True, constant_right=bias > 0)
            notes.append(f"node {nid}: all observation weights are zero; always goes "
                         f"{'right' if bias > 0 else 'left'}")
            continue
        thr = -bias / w_max
        raw = float(norm.mean[i] + norm.std[i] * thr)
        nodes[nid] = AxisNode(nid, i, raw, float(thr), ">" if w_max > 0 else "<", topo_node.left, topo_node.right)
    for k, nid in enumerate(topo.leaf_ids):
        dist = marginal.leaf_actions[k]
        a = int(np.argmax(dist))
        nodes[nid] = AxisLeaf(nid, a, float(dist[a]), tuple(float(v) for v in dist))
    return AxisAlignedTree(topo.root, nodes, timestep, None if h is None else np.array(h), notes)


def to_axis_aligned(policy: TreePolicy, h, timestep: Optional[int] = None) -> AxisAlignedTree:
    return _axis_tree(marginalize_history(policy, h), None, timestep, h)


def adjust_threshold_with_evolution(policy: TreePolicy, h, z_pred, timestep: Optional[int] = None) -> AxisAlignedTree:
    """Like ``to_axis_aligned`` but non-selected dimensions contribute ``w_i * z_pred_i``.

    ``z_pred`` is the tree's predicted (normalized) observation for this step.
    """
    z_pred = np.asarray(z_pred, dtype=float)
    if z_pred.shape != (policy.obs_dim,):
        raise StructureError(f"predicted observation has shape {z_pred.shape}, expected ({policy.obs_dim},)")
    return _axis_tree(marginalize_history(policy, h), z_pred, timestep, h)


def _reachable_side(node: AxisNode, lo: np.ndarray, hi: np.ndarray) -> tuple[bool, bool]:
    """Whether the left and right branches can be reached inside the box [lo, hi]."""
    if node.degenerate:
        return (not node.constant_right, node.constant_right)
    a, b, t = lo[node.feature], hi[node.feature], node.threshold
    if node.direction == ">":
        return (a <= t, b > t)
    return (b >= t, a < t)


def _child_box(node: AxisNode, lo, hi, right: bool):
    lo, hi = lo.copy(), hi.copy()
    if node.degenerate:
        return lo, hi
    i, t = node.feature, node.threshold
    if (node.direction == ">") == right:
        lo[i] = max(lo[i], t)
    else:
        hi[i] = min(hi[i], t)
    return lo, hi


def prune_axis_aligned(tree: AxisAlignedTree, feature_ranges, val_observations=None,
                       p_min: float = 0.05) -> AxisAlignedTree:
    """Drop unreachable branches, then leaves under ``p_min`` validation mass.

    ``feature_ranges`` is ``(min, max)`` per raw dimension; ``val_observations``
    are raw observation vectors routed by hard traversal.
    """
    lo0, hi0 = (np.asarray(v, dtype=float) for v in feature_ranges)
    nodes = dict(tree.nodes)
    notes = list(tree.notes)

    def walk(nid, lo, hi):
        node = nodes[nid]
        if isinstance(node, AxisLeaf):
            return nid
        left_ok, right_ok = _reachable_side(node, lo, hi)
        if left_ok and right_ok:
            left = walk(node.left, *_child_box(node, lo, hi, False))
            right = walk(node.right, *_child_box(node, lo, hi, True))
            nodes[nid] = replace(node, left=left, right=right)
            return nid
        keep_right = right_ok or not left_ok
        reason = "degenerate" if node.degenerate else "unreachable"
        notes.append(f"node {nid}: {'left' if keep_right else 'right'} branch {reason}, collapsed")
        child = node.right if keep_right else node.left
        return walk(child, *_child_box(node, lo, hi, keep_right))

    out = AxisAlignedTree(walk(tree.root, lo0, hi0), nodes, tree.timestep, tree.history, notes)
    if val_observations is None or len(val_observations) == 0 or p_min <= 0:
        return out
    masses = out.leaf_masses(val_observations)
    top = max(masses, key=lambda nid: (masses[nid], -nid))  # the majority path always survives
    while out.n_leaves > 1:
        masses = out.leaf_masses(val_observations)
        victim = min((nid for nid in masses if nid != top), key=lambda nid: (masses[nid], nid))
        if masses[victim] >= p_min:
            break
        parent = next(nid for nid in out.inner_ids if victim in (nodes[nid].left, nodes[nid].right))
        pnode = nodes[parent]
        sibling = pnode.right if pnode.left == victim else pnode.left
        _replace_child(out, parent, sibling)
        out.notes.append(f"leaf {victim}: validation mass {masses[victim]:.3g} < {p_min}, collapsed")
    return out


def _replace_child(tree: AxisAlignedTree, old: int, new: int) -> None:
    if tree.root == old:
        tree.root = new
        return
    for nid in tree.inner_ids:
        node = tree.nodes[nid]
        if node.left == old:
            tree.nodes[nid] = replace(node, left=new)
            return
        if node.right == old:
            tree.nodes[nid] = replace(node, right=new)
            return


def axis_aligned_predictions(policy: TreePolicy, trajectories: Sequence[Trajectory],
                             evolution_adjust: bool = False) -> list[np.ndarray]:
    """Per-step actions of the per-timestep axis-aligned trees along soft rollouts."""
    batch = make_batch(list(trajectories), policy.normalizer)
    roll = rollout_batch(policy, batch.z, "soft")
    out = []
    for b, tr in enumerate(trajectories):
        preds = np.zeros(len(tr), dtype=int)
        for t in range(len(tr)):
            h = roll.h[b, t]
            if evolution_adjust:
                z_hat = roll.z_pred[b, t - 1] if t > 0 else np.zeros(policy.obs_dim)
                tree = adjust_threshold_with_evolution(policy, h, z_hat, t + 1)
            else:
                tree = to_axis_aligned(policy, h, t + 1)
            preds[t] = tree.predict(tr.observations[t])
        out.append(preds)
    return out


def axis_aligned_accuracy(policy: TreePolicy, trajectories: Sequence[Trajectory],
                          evolution_adjust: bool = False) -> float:
    preds = axis_aligned_predictions(policy, trajectories, evolution_adjust)
    hits = sum(int(np.sum(p == tr.actions)) for p, tr in zip(preds, trajectories))
    return hits / sum(len(tr) for tr in trajectories)
