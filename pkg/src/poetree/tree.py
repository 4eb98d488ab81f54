"""Recurrent soft decision trees: structure, gating and forward computation.

A policy is a binary tree whose inner nodes route the concatenated input
``[h; z]`` probabilistically (sigmoid gates) and whose leaves emit three
things: an action distribution, the next history embedding and a prediction
of the next (normalized) observation. All batched math lives here so that the
single-step helpers, rollouts and the training objective share one code path.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from functools import cached_property
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .data import DataError, Normalizer, Trajectory

LOG_EPS = 1e-12


class StructureError(ValueError):
    """Inconsistent topology, parameter shapes or input dimensions."""


class RecurrenceModel(str, enum.Enum):
    """Leaf model producing the next history embedding."""

    FIXED_SOFTMAX = "fixed_softmax"  # softmax(theta_h)
    FIXED_TANH = "fixed_tanh"  # tanh(theta_h)
    VEC_HIST = "vec_hist"  # tanh(theta_h + theta_r * h)
    MATRIX_OBS = "matrix_obs"  # tanh(theta_h + theta_f z)
    RNN_VEC_HIST = "rnn_vec_hist"  # tanh(theta_h + theta_r * h + theta_f z)
    MATRIX_HIST = "matrix_hist"  # tanh(theta_h + theta_r h)
    RNN = "rnn"  # tanh(theta_h + theta_r h + theta_f z)

    @property
    def hist_kind(self) -> Optional[str]:
        if self in (RecurrenceModel.VEC_HIST, RecurrenceModel.RNN_VEC_HIST):
            return "vec"
        if self in (RecurrenceModel.MATRIX_HIST, RecurrenceModel.RNN):
            return "mat"
        return None

    @property
    def uses_obs(self) -> bool:
        return self in (RecurrenceModel.MATRIX_OBS, RecurrenceModel.RNN_VEC_HIST, RecurrenceModel.RNN)


class Gating(str, enum.Enum):
    OBLIQUE = "oblique"  # sigmoid(w . [h; z] + b)
    SOFT_AND = "soft_and"  # sigmoid(w' . h + b') * prod_i sigmoid(w_i z_i + b_i)


# --------------------------------------------------------------------------
# topology


@dataclass(frozen=True)
class Node:
    id: int
    depth: int
    parent: Optional[int] = None
    left: Optional[int] = None
    right: Optional[int] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None


@dataclass(frozen=True)
class TreeTopology:
    nodes: Mapping[int, Node]
    root: int = 0
    max_depth: int = 5

    def __post_init__(self):
        self.validate()

    # construction helpers -------------------------------------------------

    @classmethod
    def single_leaf(cls, max_depth: int = 5) -> "TreeTopology":
        return cls({0: Node(0, 0)}, 0, max_depth)

    @classmethod
    def complete(cls, depth: int, max_depth: int = 5) -> "TreeTopology":
        """Complete tree in heap numbering: children of ``i`` are ``2i+1`` and ``2i+2``."""
        nodes = {}
        n_nodes = 2 ** (depth + 1) - 1
        for i in range(n_nodes):
            d = int(np.floor(np.log2(i + 1)))
            parent = None if i == 0 else (i - 1) // 2
            if d < depth:
                nodes[i] = Node(i, d, parent, 2 * i + 1, 2 * i + 2)
            else:
                nodes[i] = Node(i, d, parent)
        return cls(nodes, 0, max(max_depth, depth))

    def validate(self) -> None:
        nodes = self.nodes
        if self.root not in nodes:
            raise StructureError("root id missing from nodes")
        if nodes[self.root].parent is not None or nodes[self.root].depth != 0:
            raise StructureError("root must have no parent and depth 0")
        seen = set()
        stack = [self.root]
        while stack:
            nid = stack.pop()
            if nid in seen:
                raise StructureError(f"node {nid} reached twice")
            seen.add(nid)
            node = nodes[nid]
            if node.id != nid:
                raise StructureError(f"node keyed {nid} carries id {node.id}")
            if node.depth > self.max_depth:
                raise StructureError(f"node {nid} at depth {node.depth} exceeds max depth {self.max_depth}")
            if (node.left is None) != (node.right is None):
                raise StructureError(f"inner node {nid} must have exactly two children")
            if node.left is not None:
                for child in (node.left, node.right):
                    if child not in nodes:
                        raise StructureError(f"node {nid} references missing child {child}")
                    c = nodes[child]
                    if c.parent != nid or c.depth != node.depth + 1:
                        raise StructureError(f"child {child} has inconsistent parent/depth")
                    stack.append(child)
        if seen != set(nodes):
            raise StructureError(f"unreachable nodes: {sorted(set(nodes) - seen)}")

    # views ---------------------------------------------------------------

    @cached_property
    def node_ids(self) -> tuple[int, ...]:
        return tuple(sorted(self.nodes))

    @cached_property
    def inner_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.node_ids if not self.nodes[i].is_leaf)

    @cached_property
    def leaf_ids(self) -> tuple[int, ...]:
        return tuple(i for i in self.node_ids if self.nodes[i].is_leaf)

    @cached_property
    def inner_index(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self.inner_ids)}

    @cached_property
    def leaf_index(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self.leaf_ids)}

    @cached_property
    def node_index(self) -> dict[int, int]:
        return {nid: k for k, nid in enumerate(self.node_ids)}

    @property
    def n_inner(self) -> int:
        return len(self.inner_ids)

    @property
    def n_leaves(self) -> int:
        return len(self.leaf_ids)

    @property
    def depth(self) -> int:
        return max(n.depth for n in self.nodes.values())

    def is_leaf(self, nid: int) -> bool:
        return self.nodes[nid].is_leaf

    def path(self, nid: int) -> list[tuple[int, bool]]:
        """Root-to-node list of ``(ancestor id, went_right)``."""
        out = []
        node = self.nodes[nid]
        while node.parent is not None:
            parent = self.nodes[node.parent]
            out.append((parent.id, parent.right == node.id))
            node = parent
        return out[::-1]

    def subtree(self, nid: int) -> list[int]:
        out, stack = [], [nid]
        while stack:
            cur = stack.pop()
            out.append(cur)
            node = self.nodes[cur]
            if not node.is_leaf:
                stack.extend((node.right, node.left))
        return sorted(out)

    @cached_property
    def routing(self) -> tuple[np.ndarray, np.ndarray]:
        """Indicator matrices (n_nodes, n_inner): node lies right / left of an ancestor."""
        right = np.zeros((len(self.node_ids), self.n_inner))
        left = np.zeros_like(right)
        for k, nid in enumerate(self.node_ids):
            for anc, went_right in self.path(nid):
                (right if went_right else left)[k, self.inner_index[anc]] = 1.0
        return right, left

    @cached_property
    def leaf_columns(self) -> np.ndarray:
        return np.array([self.node_index[i] for i in self.leaf_ids], dtype=int)

    @cached_property
    def inner_columns(self) -> np.ndarray:
        return np.array([self.node_index[i] for i in self.inner_ids], dtype=int)

    @cached_property
    def right_child_columns(self) -> np.ndarray:
        return np.array([self.node_index[self.nodes[i].right] for i in self.inner_ids], dtype=int)

    @cached_property
    def inner_depths(self) -> np.ndarray:
        return np.array([self.nodes[i].depth for i in self.inner_ids], dtype=float)

    # edits ---------------------------------------------------------------

    def split(self, leaf_id: int) -> tuple["TreeTopology", int, int]:
        """Turn a leaf into an inner node with two fresh leaves; returns (topology, left, right)."""
        if leaf_id not in self.nodes:
            raise StructureError(f"no node {leaf_id}")
        node = self.nodes[leaf_id]
        if not node.is_leaf:
            raise StructureError(f"node {leaf_id} is not a leaf")
        if node.depth + 1 > self.max_depth:
            raise StructureError(f"splitting node {leaf_id} would exceed max depth {self.max_depth}")
        new_left = max(self.nodes) + 1
        new_right = new_left + 1
        nodes = dict(self.nodes)
        nodes[leaf_id] = replace(node, left=new_left, right=new_right)
        nodes[new_left] = Node(new_left, node.depth + 1, leaf_id)
        nodes[new_right] = Node(new_right, node.depth + 1, leaf_id)
        return TreeTopology(nodes, self.root, self.max_depth), new_left, new_right

    def collapse(self, inner_id: int, keep_child: int) -> "TreeTopology":
        """Replace ``inner_id`` by the subtree rooted at ``keep_child`` (other child dropped)."""
        node = self.nodes[inner_id]
        if node.is_leaf or keep_child not in (node.left, node.right):
            raise StructureError(f"{keep_child} is not a child of inner node {inner_id}")
        dropped = node.right if keep_child == node.left else node.left
        drop = set(self.subtree(dropped)) | {inner_id}
        kept = self.subtree(keep_child)
        nodes = {k: v for k, v in self.nodes.items() if k not in drop}
        for nid in kept:
            n = nodes[nid]
            nodes[nid] = replace(n, depth=n.depth - 1)
        nodes[keep_child] = replace(nodes[keep_child], parent=node.parent)
        root = self.root
        if node.parent is None:
            root = keep_child
        else:
            parent = nodes[node.parent]
            if parent.left == inner_id:
                nodes[node.parent] = replace(parent, left=keep_child)
            else:
                nodes[node.parent] = replace(parent, right=keep_child)
        return TreeTopology(nodes, root, self.max_depth)

    def to_dict(self) -> dict:
        return {
            "root": self.root,
            "max_depth": self.max_depth,
            "nodes": [
                {"id": n.id, "depth": n.depth, "parent": n.parent, "left": n.left, "right": n.right}
                for n in (self.nodes[i] for i in self.node_ids)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TreeTopology":
        nodes = {
            int(n["id"]): Node(int(n["id"]), int(n["depth"]), n["parent"], n["left"], n["right"]) for n in d["nodes"]
        }
        return cls(nodes, int(d["root"]), int(d["max_depth"]))


# --------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class InnerParams:
    w: np.ndarray
    b: float


@dataclass(frozen=True)
class LeafParams:
    theta_a: np.ndarray
    theta_h: np.ndarray
    theta_z: np.ndarray
    theta_r: Optional[np.ndarray] = None
    theta_f: Optional[np.ndarray] = None


def param_shapes(
    n_inner: int, n_leaves: int, obs_dim: int, n_actions: int, hist_dim: int,
    recurrence: RecurrenceModel, gating: Gating,
) -> dict[str, tuple[int, ...]]:
    """Shapes of the stacked parameter arrays; row ``k`` belongs to the k-th inner/leaf id."""
    M, D, K = hist_dim, obs_dim, n_actions
    shapes: dict[str, tuple[int, ...]] = {}
    if gating is Gating.OBLIQUE:
        shapes["w"] = (n_inner, M + D)
        shapes["b"] = (n_inner,)
    else:
        shapes["wh"] = (n_inner, M)
        shapes["bh"] = (n_inner,)
        shapes["wz"] = (n_inner, D)
        shapes["bz"] = (n_inner, D)
    shapes["theta_a"] = (n_leaves, K)
    shapes["theta_h"] = (n_leaves, M)
    shapes["theta_z"] = (n_leaves, D)
    if recurrence.hist_kind == "vec":
        shapes["theta_r"] = (n_leaves, M)
    elif recurrence.hist_kind == "mat":
        shapes["theta_r"] = (n_leaves, M, M)
    if recurrence.uses_obs:
        shapes["theta_f"] = (n_leaves, M, D)
    return shapes


INNER_KEYS = ("w", "b", "wh", "bh", "wz", "bz")


@dataclass(frozen=True)
class TreePolicy:
    """Topology plus stacked parameters; treat as immutable.

    Inner-node arrays are row-aligned with ``topology.inner_ids`` and leaf
    arrays with ``topology.leaf_ids``.
    """

    topology: TreeTopology
    params: Mapping[str, np.ndarray]
    obs_dim: int
    n_actions: int
    hist_dim: int
    normalizer: Normalizer
    recurrence: RecurrenceModel = RecurrenceModel.FIXED_TANH
    gating: Gating = Gating.OBLIQUE

    def __post_init__(self):
        object.__setattr__(self, "recurrence", RecurrenceModel(self.recurrence))
        object.__setattr__(self, "gating", Gating(self.gating))
        expected = param_shapes(
            self.topology.n_inner, self.topology.n_leaves, self.obs_dim, self.n_actions,
            self.hist_dim, self.recurrence, self.gating,
        )
        if set(expected) != set(self.params):
            raise StructureError(f"parameter keys {sorted(self.params)} != expected {sorted(expected)}")
        for key, shape in expected.items():
            arr = np.asarray(self.params[key], dtype=float)
            if arr.shape != shape:
                raise StructureError(f"parameter {key!r} has shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise StructureError(f"parameter {key!r} has non-finite entries")
        if len(self.normalizer.mean) != self.obs_dim:
            raise StructureError("normalizer dimension does not match obs_dim")

    @property
    def input_dim(self) -> int:
        return self.hist_dim + self.obs_dim

    def with_params(self, params: Mapping[str, np.ndarray]) -> "TreePolicy":
        return replace(self, params={k: np.array(v, dtype=float) for k, v in params.items()})

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: np.array(v, dtype=float) for k, v in self.params.items()}

    def inner(self, nid: int) -> InnerParams:
        k = self.topology.inner_index[nid]
        if self.gating is Gating.OBLIQUE:
            return InnerParams(self.params["w"][k].copy(), float(self.params["b"][k]))
        raise StructureError("soft-AND gating nodes have per-dimension parameters; use soft_and_params")

    def soft_and_params(self, nid: int) -> dict[str, np.ndarray]:
        k = self.topology.inner_index[nid]
        return {key: np.array(self.params[key][k]) for key in ("wh", "bh", "wz", "bz")}

    def leaf(self, nid: int) -> LeafParams:
        k = self.topology.leaf_index[nid]
        p = self.params
        return LeafParams(
            theta_a=p["theta_a"][k].copy(),
            theta_h=p["theta_h"][k].copy(),
            theta_z=p["theta_z"][k].copy(),
            theta_r=p["theta_r"][k].copy() if "theta_r" in p else None,
            theta_f=p["theta_f"][k].copy() if "theta_f" in p else None,
        )

    def n_parameters(self) -> int:
        return int(sum(np.asarray(v).size for v in self.params.values()))


def n_parameters_for(
    topology: TreeTopology, obs_dim: int, n_actions: int, hist_dim: int,
    recurrence: RecurrenceModel, gating: Gating = Gating.OBLIQUE,
) -> int:
    shapes = param_shapes(topology.n_inner, topology.n_leaves, obs_dim, n_actions, hist_dim,
                          RecurrenceModel(recurrence), Gating(gating))
    return int(sum(np.prod(s) for s in shapes.values()))


def random_policy(
    topology: TreeTopology, obs_dim: int, n_actions: int, hist_dim: int,
    recurrence: RecurrenceModel = RecurrenceModel.FIXED_TANH,
    gating: Gating = Gating.OBLIQUE,
    normalizer: Optional[Normalizer] = None,
    scale: float = 0.1,
    rng: Optional[np.random.Generator] = None,
) -> TreePolicy:
    """Gaussian(0, scale^2) parameters with zero biases."""
    rng = rng if rng is not None else np.random.default_rng()
    recurrence, gating = RecurrenceModel(recurrence), Gating(gating)
    shapes = param_shapes(topology.n_inner, topology.n_leaves, obs_dim, n_actions, hist_dim, recurrence, gating)
    params = {}
    for key in sorted(shapes):
        if key in ("b", "bh", "bz"):
            params[key] = np.zeros(shapes[key])
        else:
            params[key] = scale * rng.standard_normal(shapes[key])
    return TreePolicy(
        topology, params, obs_dim, n_actions, hist_dim,
        normalizer if normalizer is not None else Normalizer.identity(obs_dim),
        recurrence, gating,
    )


# --------------------------------------------------------------------------
# elementary functions


def sigmoid(x):
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def log_sigmoid(x):
    x = np.asarray(x, dtype=float)
    return -np.logaddexp(0.0, -x)


def softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(x, axis=-1):
    x = np.asarray(x, dtype=float)
    shifted = x - x.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# batched gating


@dataclass
class GateEval:
    """Gate and path-probability values for a batch of inputs ``x`` (B, M+D)."""

    x: np.ndarray
    g: np.ndarray  # (B, n_inner)
    log_g: np.ndarray
    log_1mg: np.ndarray
    log_p: np.ndarray  # (B, n_nodes), columns ordered like topology.node_ids
    p: np.ndarray
    u_h: Optional[np.ndarray] = None  # soft-AND pre-activations
    u_z: Optional[np.ndarray] = None

    def leaf_probs(self, topology: TreeTopology) -> np.ndarray:
        return self.p[:, topology.leaf_columns]


def evaluate_gates(policy: TreePolicy, x: np.ndarray) -> GateEval:
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != policy.input_dim:
        raise StructureError(f"input has {x.shape[1]} entries, tree expects {policy.input_dim}")
    topo = policy.topology
    p = policy.params
    u_h = u_z = None
    if policy.gating is Gating.OBLIQUE:
        a = x @ p["w"].T + p["b"]
        log_g = log_sigmoid(a)
        log_1mg = log_sigmoid(-a)
        g = sigmoid(a)
    else:
        M = policy.hist_dim
        u_h = x[:, :M] @ p["wh"].T + p["bh"]
        u_z = x[:, None, M:] * p["wz"][None] + p["bz"][None]
        log_g = log_sigmoid(u_h) + log_sigmoid(u_z).sum(axis=2)
        g = np.exp(log_g)
        log_1mg = np.log(np.maximum(-np.expm1(log_g), 1e-300))
    right, left = topo.routing
    log_p = log_g @ right.T + log_1mg @ left.T
    return GateEval(x, g, log_g, log_1mg, log_p, np.exp(log_p), u_h, u_z)


def gate_backward(policy: TreePolicy, ev: GateEval, d_log_p: np.ndarray, grads: dict) -> np.ndarray:
    """Accumulate gating-parameter gradients given dL/dlog P (B, n_nodes); returns dL/dx."""
    right, left = policy.topology.routing
    gp = d_log_p @ right  # dL/dlog g
    gn = d_log_p @ left  # dL/dlog(1-g)
    p = policy.params
    if policy.gating is Gating.OBLIQUE:
        da = gp * (1.0 - ev.g) - gn * ev.g
        grads["w"] += da.T @ ev.x
        grads["b"] += da.sum(axis=0)
        return da @ p["w"]
    M = policy.hist_dim
    ratio = ev.g / np.maximum(-np.expm1(ev.log_g), 1e-300)
    coef = gp - gn * ratio  # dL/dlog g with the log(1-g) path folded in
    du_h = coef * (1.0 - sigmoid(ev.u_h))
    du_z = coef[:, :, None] * (1.0 - sigmoid(ev.u_z))
    grads["wh"] += du_h.T @ ev.x[:, :M]
    grads["bh"] += du_h.sum(axis=0)
    grads["wz"] += np.einsum("bnd,bd->nd", du_z, ev.x[:, M:])
    grads["bz"] += du_z.sum(axis=0)
    dx = np.empty_like(ev.x)
    dx[:, :M] = du_h @ p["wh"]
    dx[:, M:] = np.einsum("bnd,nd->bd", du_z, p["wz"])
    return dx


# --------------------------------------------------------------------------
# leaf outputs


def leaf_action_table(policy: TreePolicy) -> np.ndarray:
    """(n_leaves, K) action distributions."""
    return softmax(policy.params["theta_a"], axis=1)


def leaf_history_pre(policy: TreePolicy, h: np.ndarray, z: np.ndarray) -> np.ndarray:
    """Pre-activation of the history leaf model, shape (B, n_leaves, M)."""
    p = policy.params
    B = h.shape[0]
    pre = np.broadcast_to(p["theta_h"][None], (B,) + p["theta_h"].shape).copy()
    kind = policy.recurrence.hist_kind
    if kind == "vec":
        pre += p["theta_r"][None] * h[:, None, :]
    elif kind == "mat":
        pre += np.einsum("lmn,bn->blm", p["theta_r"], h)
    if policy.recurrence.uses_obs:
        pre += np.einsum("lmd,bd->blm", p["theta_f"], z)
    return pre


def leaf_history_batch(policy: TreePolicy, h: np.ndarray, z: np.ndarray) -> np.ndarray:
    pre = leaf_history_pre(policy, h, z)
    if policy.recurrence is RecurrenceModel.FIXED_SOFTMAX:
        return softmax(pre, axis=2)
    return np.tanh(pre)


@dataclass
class StepOutput:
    leaf_path_probs: np.ndarray
    action_dist: np.ndarray
    h_next: np.ndarray
    z_pred: np.ndarray
    leaf_id: Optional[int] = None


@dataclass
class BatchStep:
    """Vectorized single-step outputs for B inputs."""

    gates: GateEval
    leaf_probs: np.ndarray  # (B, L)
    action_dist: np.ndarray  # (B, K)
    h_next: np.ndarray  # (B, M)
    z_pred: np.ndarray  # (B, D)
    leaf_hist: np.ndarray  # (B, L, M)
    chosen: Optional[np.ndarray] = None  # hard mode leaf positions


def step_batch(policy: TreePolicy, h: np.ndarray, z: np.ndarray, mode: str = "soft") -> BatchStep:
    """One tree step for normalized observations ``z`` (B, D) and histories ``h`` (B, M)."""
    x = np.concatenate([h, z], axis=1)
    ev = evaluate_gates(policy, x)
    P = ev.leaf_probs(policy.topology)
    actions = leaf_action_table(policy)
    hist = leaf_history_batch(policy, h, z)
    zt = np.tanh(policy.params["theta_z"])
    if mode == "soft":
        return BatchStep(ev, P, P @ actions, np.einsum("bl,blm->bm", P, hist), P @ zt, hist)
    if mode == "hard":
        # argmax returns the first maximum, i.e. the lowest leaf id
        chosen = np.argmax(P, axis=1)
        rows = np.arange(len(chosen))
        return BatchStep(ev, P, actions[chosen], hist[rows, chosen], zt[chosen], hist, chosen)
    raise ValueError(f"mode must be 'soft' or 'hard', got {mode!r}")


# --------------------------------------------------------------------------
# single-example operations


def gate_probability(params: InnerParams, x) -> float:
    w = np.asarray(params.w, dtype=float)
    x = np.asarray(x, dtype=float)
    if w.shape != x.shape:
        raise StructureError(f"gate weight length {w.shape} != input length {x.shape}")
    return float(sigmoid(np.dot(x, w) + params.b))


def path_probabilities(policy: TreePolicy, x) -> np.ndarray:
    """Leaf path probabilities in ``topology.leaf_ids`` order."""
    ev = evaluate_gates(policy, np.asarray(x, dtype=float)[None])
    return ev.leaf_probs(policy.topology)[0]


def leaf_action_distribution(leaf: LeafParams) -> np.ndarray:
    return softmax(leaf.theta_a)


def leaf_history(leaf: LeafParams, model: RecurrenceModel, h_prev, z_prev) -> np.ndarray:
    model = RecurrenceModel(model)
    h_prev = np.asarray(h_prev, dtype=float)
    z_prev = np.asarray(z_prev, dtype=float)
    pre = np.array(leaf.theta_h, dtype=float)
    if model.hist_kind is not None:
        if leaf.theta_r is None:
            raise StructureError(f"{model.value} needs theta_r")
        if model.hist_kind == "vec":
            if leaf.theta_r.shape != pre.shape or h_prev.shape != pre.shape:
                raise StructureError("theta_r, h_prev and theta_h must share shape")
            pre = pre + leaf.theta_r * h_prev
        else:
            if leaf.theta_r.shape != (len(pre), len(h_prev)):
                raise StructureError(f"theta_r shape {leaf.theta_r.shape} incompatible with M={len(pre)}")
            pre = pre + leaf.theta_r @ h_prev
    if model.uses_obs:
        if leaf.theta_f is None or leaf.theta_f.shape != (len(pre), len(z_prev)):
            raise StructureError("theta_f missing or of wrong shape")
        pre = pre + leaf.theta_f @ z_prev
    if model is RecurrenceModel.FIXED_SOFTMAX:
        return softmax(pre)
    return np.tanh(pre)


def _check_obs(policy: TreePolicy, z_raw) -> np.ndarray:
    z_raw = np.asarray(z_raw, dtype=float)
    if z_raw.shape != (policy.obs_dim,):
        raise StructureError(f"observation has shape {z_raw.shape}, expected ({policy.obs_dim},)")
    if not np.all(np.isfinite(z_raw)):
        raise DataError("non-finite observation entries")
    return policy.normalizer.transform(z_raw)


def forward_step(policy: TreePolicy, h, z_raw) -> StepOutput:
    z = _check_obs(policy, z_raw)
    out = step_batch(policy, np.asarray(h, dtype=float)[None], z[None], "soft")
    return StepOutput(out.leaf_probs[0], out.action_dist[0], out.h_next[0], out.z_pred[0])


def hard_forward_step(policy: TreePolicy, h, z_raw) -> StepOutput:
    z = _check_obs(policy, z_raw)
    out = step_batch(policy, np.asarray(h, dtype=float)[None], z[None], "hard")
    leaf_id = policy.topology.leaf_ids[int(out.chosen[0])]
    return StepOutput(out.leaf_probs[0], out.action_dist[0], out.h_next[0], out.z_pred[0], leaf_id)


def rollout(policy: TreePolicy, trajectory: Trajectory, mode: str = "soft") -> list[StepOutput]:
    if len(trajectory) == 0:
        raise DataError("cannot roll out an empty trajectory")
    step = forward_step if mode == "soft" else hard_forward_step
    h = np.zeros(policy.hist_dim)
    outputs = []
    for z_raw in trajectory.observations:
        out = step(policy, h, z_raw)
        outputs.append(out)
        h = out.h_next
    return outputs


@dataclass
class RolloutBatch:
    """Per-step outputs for a padded batch; arrays are (B, T, ...)."""

    h: np.ndarray  # history fed into each step
    leaf_probs: np.ndarray
    action_dist: np.ndarray
    z_pred: np.ndarray
    chosen: Optional[np.ndarray] = None


def rollout_batch(policy: TreePolicy, z: np.ndarray, mode: str = "soft") -> RolloutBatch:
    """Roll out normalized observations ``z`` (B, T, D) without building gradient caches."""
    B, T, _ = z.shape
    M = policy.hist_dim
    L = policy.topology.n_leaves
    hs = np.zeros((B, T, M))
    probs = np.zeros((B, T, L))
    acts = np.zeros((B, T, policy.n_actions))
    preds = np.zeros((B, T, policy.obs_dim))
    chosen = np.zeros((B, T), dtype=int) if mode == "hard" else None
    h = np.zeros((B, M))
    for t in range(T):
        out = step_batch(policy, h, z[:, t], mode)
        hs[:, t] = h
        probs[:, t] = out.leaf_probs
        acts[:, t] = out.action_dist
        preds[:, t] = out.z_pred
        if chosen is not None:
            chosen[:, t] = out.chosen
        h = out.h_next
    return RolloutBatch(hs, probs, acts, preds, chosen)


def iter_batches(items: Sequence, size: int) -> Iterable[Sequence]:
    for i in range(0, len(items), size):
        yield items[i : i + size]
