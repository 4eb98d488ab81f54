"""File formats: model JSON, trajectory JSON lines and DOT graphs.

Floats are written with Python's shortest round-trip repr, so reading a
model back reproduces every parameter bit for bit.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .data import DataError, Normalizer, Trajectory
from .simplify import AxisAlignedTree, AxisLeaf, AxisNode
from .tree import INNER_KEYS, Gating, RecurrenceModel, TreePolicy, TreeTopology, param_shapes

FORMAT_VERSION = 1


class FormatError(DataError):
    """Raised for unreadable or inconsistent model and trajectory files."""


# --------------------------------------------------------------------------
# models


def policy_to_dict(policy: TreePolicy, metadata: Optional[dict] = None) -> dict:
    topo = policy.topology
    nodes = []
    for nid in topo.node_ids:
        node = topo.nodes[nid]
        inner = not topo.is_leaf(nid)
        ids = topo.inner_ids if inner else topo.leaf_ids
        k = ids.index(nid)
        params = {
            key: {"shape": list(arr.shape[1:]), "values": [float(v) for v in np.ravel(arr[k])]}
            for key, arr in sorted(policy.params.items())
            if (key in INNER_KEYS) == inner
        }
        nodes.append({
            "id": nid, "kind": "inner" if inner else "leaf", "depth": node.depth,
            "parent": node.parent, "left": node.left, "right": node.right, "params": params,
        })
    return {
        "format_version": FORMAT_VERSION,
        "dims": {"D": policy.obs_dim, "K": policy.n_actions, "M": policy.hist_dim},
        "recurrence": policy.recurrence.value,
        "gating": policy.gating.value,
        "normalizer": {"mean": [float(v) for v in policy.normalizer.mean],
                       "std": [float(v) for v in policy.normalizer.std]},
        "topology": {"root": topo.root, "max_depth": topo.max_depth},
        "nodes": nodes,
        "metadata": metadata or {},
    }


def policy_from_dict(doc: dict) -> TreePolicy:
    try:
        if doc.get("format_version") != FORMAT_VERSION:
            raise FormatError(f"unsupported model format version {doc.get('format_version')!r}")
        dims = doc["dims"]
        topo = TreeTopology.from_dict({
            "root": doc["topology"]["root"], "max_depth": doc["topology"]["max_depth"],
            "nodes": [{k: n[k] for k in ("id", "depth", "parent", "left", "right")} for n in doc["nodes"]],
        })
        by_id = {int(n["id"]): n["params"] for n in doc["nodes"]}
        params: dict[str, np.ndarray] = {}
        for ids, inner in ((topo.inner_ids, True), (topo.leaf_ids, False)):
            keys = {k for nid in ids for k in by_id[nid]}
            for key in sorted(keys):
                rows = [np.array(by_id[nid][key]["values"], dtype=float).reshape(by_id[nid][key]["shape"])
                        for nid in ids]
                params[key] = np.stack(rows)
        norm = Normalizer(np.array(doc["normalizer"]["mean"], dtype=float),
                          np.array(doc["normalizer"]["std"], dtype=float))
        # a single-leaf tree has no inner rows to read the gate arrays from
        shapes = param_shapes(topo.n_inner, topo.n_leaves, int(dims["D"]), int(dims["K"]), int(dims["M"]),
                              RecurrenceModel(doc["recurrence"]), Gating(doc["gating"]))
        for key, shape in shapes.items():
            if key not in params and 0 in shape:
                params[key] = np.zeros(shape)
        return TreePolicy(topo, params, int(dims["D"]), int(dims["K"]), int(dims["M"]), norm,
                          RecurrenceModel(doc["recurrence"]), Gating(doc["gating"]))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"malformed model document: {exc}") from exc


def save_policy(policy: TreePolicy, path, metadata: Optional[dict] = None) -> None:
    Path(path).write_text(json.dumps(policy_to_dict(policy, metadata), indent=1) + "\n")


def load_policy(path) -> tuple[TreePolicy, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not valid JSON ({exc})") from exc
    return policy_from_dict(doc), doc.get("metadata", {})


# --------------------------------------------------------------------------
# trajectories


def trajectory_to_dict(tr: Trajectory) -> dict:
    d = {"id": tr.id, "observations": tr.observations.tolist(), "actions": tr.actions.tolist()}
    if tr.hidden is not None:
        d["hidden"] = tr.hidden.tolist()
    return d


def write_trajectories(trajectories: Iterable[Trajectory], path) -> None:
    with open(path, "w") as fh:
        for tr in trajectories:
            fh.write(json.dumps(trajectory_to_dict(tr)) + "\n")


def read_trajectories(path) -> list[Trajectory]:
    out: list[Trajectory] = []
    dim = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                obs = rec["observations"]
                lengths = {len(row) for row in obs}
                if len(lengths) > 1:
                    raise FormatError(f"ragged observation rows {sorted(lengths)}")
                tr = Trajectory(np.array(obs, dtype=float), np.array(rec["actions"], dtype=int),
                                str(rec.get("id", f"line-{lineno}")), rec.get("hidden"))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if dim is None:
                dim = tr.obs_dim
            elif tr.obs_dim != dim:
                raise FormatError(f"{path}:{lineno}: observation dimension {tr.obs_dim}, earlier lines have {dim}")
            out.append(tr)
    if not out:
        raise FormatError(f"{path}: no trajectories")
    return out


# --------------------------------------------------------------------------
# DOT


def _quote(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def axis_tree_to_dot(tree: AxisAlignedTree, feature_names: Optional[Sequence[str]] = None,
                     action_names: Optional[Sequence[str]] = None, name: str = "policy") -> str:
    lines = [f"digraph {_quote(name)} {{", "  node [fontname=\"Helvetica\"];"]
    if tree.timestep is not None:
        lines.append(f"  label={_quote(f't = {tree.timestep}')};")

    def fname(i):
        return feature_names[i] if feature_names is not None else f"z{i}"

    def aname(a):
        return action_names[a] if action_names is not None else f"a{a}"

    stack = [tree.root]
    while stack:
        nid = stack.pop()
        node = tree.nodes[nid]
        if isinstance(node, AxisNode):
            if node.degenerate:
                label = f"constant: {'right' if node.constant_right else 'left'}"
            else:
                label = f"{fname(node.feature)} {node.direction} {node.threshold:.4g}"
            lines.append(f"  n{nid} [shape=box, label={_quote(label)}];")
            lines.append(f"  n{nid} -> n{node.left} [label=\"no\"];")
            lines.append(f"  n{nid} -> n{node.right} [label=\"yes\"];")
            stack.extend((node.right, node.left))
        else:
            assert isinstance(node, AxisLeaf)
            label = f"{aname(node.action)} ({node.probability:.2f})"
            lines.append(f"  n{nid} [shape=ellipse, label={_quote(label)}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def policy_to_dot(policy: TreePolicy, name: str = "policy") -> str:
    """Multidimensional tree: inner nodes list their strongest weights."""
    topo = policy.topology
    lines = [f"digraph {_quote(name)} {{"]
    M = policy.hist_dim
    for nid in topo.node_ids:
        node = topo.nodes[nid]
        if topo.is_leaf(nid):
            k = topo.leaf_index[nid]
            a = policy.params["theta_a"][k]
            dist = np.exp(a - a.max())
            dist /= dist.sum()
            lines.append(f"  n{nid} [shape=ellipse, label={_quote('[' + ', '.join(f'{p:.2f}' for p in dist) + ']')}];")
            continue
        k = topo.inner_index[nid]
        if policy.gating is Gating.OBLIQUE:
            w = policy.params["w"][k]
            top = np.argsort(-np.abs(w))[:3]
            terms = [f"{w[i]:+.2f}*{('h' + str(i)) if i < M else ('z' + str(i - M))}" for i in top]
            label = " ".join(terms) + f" {policy.params['b'][k]:+.2f} > 0"
        else:
            label = "soft AND"
        lines.append(f"  n{nid} [shape=box, label={_quote(label)}];")
        lines.append(f"  n{nid} -> n{node.left} [label=\"no\"];")
        lines.append(f"  n{nid} -> n{node.right} [label=\"yes\"];")
    lines.append("}")
    return "\n".join(lines) + "\n"
