import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import build_policy, static_dataset, stump
from poetree.data import DataError, make_batch
from poetree.growth import (
    GrowthConfig,
    GrowthEvent,
    collapse_node,
    grow,
    initialize_tree,
    leaf_masses,
    prune_low_probability,
    replay_topology,
    split_leaf,
    write_events,
)
from poetree.training import TrainingConfig
from poetree.tree import RecurrenceModel, StructureError, TreeTopology, random_policy, rollout_batch


def quick_training(**kw):
    base = dict(batch_size=32, learning_rate=0.05, patience=150, eval_every=5, max_epochs=200,
                delta1=0.0, delta2=0.0, lam=0.01)
    base.update(kw)
    return TrainingConfig(**base)


def intervals(n, k, rng):
    """One feature on [0, k); the label alternates between unit intervals."""
    X = rng.uniform(0, k, (n, 1))
    return static_dataset(X, (np.floor(X[:, 0]) % 2).astype(int))


def soft_accuracy(policy, trajs):
    batch = make_batch(trajs, policy.normalizer)
    real = batch.mask.astype(bool)
    probs = rollout_batch(policy, batch.z, "soft").action_dist[real]
    return float(np.mean(probs.argmax(1) == batch.actions[real]))


def test_config_validation():
    with pytest.raises(ValueError):
        GrowthConfig(max_depth=1, initial_depth=2)
    with pytest.raises(ValueError):
        GrowthConfig(prune_threshold=1.0)
    with pytest.raises(ValueError):
        GrowthConfig(initial_depth=0)


def test_initial_tree_shape_and_determinism():
    a = initialize_tree(3, 2, 4, RecurrenceModel.RNN, np.random.default_rng(0))
    b = initialize_tree(3, 2, 4, RecurrenceModel.RNN, np.random.default_rng(0))
    assert a.topology.n_leaves == 4 and a.topology.n_inner == 3
    np.testing.assert_array_equal(a.params["b"], 0.0)
    for k in a.params:
        np.testing.assert_array_equal(a.params[k], b.params[k])


def test_initial_leaf_masses_near_uniform():
    pol = initialize_tree(4, 2, 0, RecurrenceModel.FIXED_TANH, np.random.default_rng(1))
    z = np.random.default_rng(2).standard_normal((1000, 1, 4))
    leaf = rollout_batch(pol, z, "soft").leaf_probs.mean(axis=(0, 1))
    assert np.all((leaf >= 0.15) & (leaf <= 0.35))


def test_split_noise_scale_depth3():
    topo = TreeTopology.complete(2)
    pol = random_policy(topo, 200, 2, 0, "fixed_tanh", scale=0.0, rng=np.random.default_rng(0))
    new = split_leaf(pol, topo.leaf_ids[0], np.random.default_rng(1))
    row = new.topology.inner_ids.index(topo.leaf_ids[0])
    assert np.std(new.params["w"][row]) == pytest.approx(1 / np.sqrt(3), rel=0.15)
    assert new.params["b"][row] == 0.0


def test_split_counts_and_untouched_params(rng):
    pol = random_policy(TreeTopology.complete(2), 2, 3, 2, "rnn", scale=0.5, rng=rng)
    new = split_leaf(pol, 4, rng)
    assert new.topology.n_leaves == 5 and new.topology.n_inner == 4
    for nid in pol.topology.inner_ids:
        np.testing.assert_array_equal(new.inner(nid).w, pol.inner(nid).w)
    for nid in pol.topology.leaf_ids:
        if nid != 4:
            np.testing.assert_array_equal(new.leaf(nid).theta_a, pol.leaf(nid).theta_a)


@given(st.integers(0, 2**31 - 1), st.sampled_from(list(RecurrenceModel)))
def test_zero_noise_split_is_neutral(seed, recurrence):
    rng = np.random.default_rng(seed)
    pol = random_policy(TreeTopology.complete(2), 2, 2, 3, recurrence, scale=1.0, rng=rng)
    leaf = int(rng.choice(pol.topology.leaf_ids))
    new = split_leaf(pol, leaf, rng, noise=False)
    z = rng.standard_normal((3, 4, 2))
    a, b = rollout_batch(pol, z, "soft"), rollout_batch(new, z, "soft")
    np.testing.assert_allclose(a.action_dist, b.action_dist, atol=1e-12)
    np.testing.assert_allclose(a.h, b.h, atol=1e-12)


def test_split_errors(rng):
    pol = random_policy(TreeTopology.complete(2, max_depth=2), 1, 2, 0, "fixed_tanh", rng=rng)
    with pytest.raises(StructureError):
        split_leaf(pol, 0, rng)
    with pytest.raises(StructureError):
        split_leaf(pol, 3, rng)


def test_prune_threshold_zero_keeps_tree(rng):
    pol = random_policy(TreeTopology.complete(2), 1, 2, 0, "fixed_tanh", scale=1.0, rng=rng)
    val = static_dataset(rng.standard_normal((20, 1)), np.zeros(20))
    assert prune_low_probability(pol, val, 0.0).topology.to_dict() == pol.topology.to_dict()


def test_prune_rare_leaf_collapses_to_sibling():
    # gate = sigmoid(-4.6) ~ 0.01 for every input: leaf 2 is rare
    pol = build_policy(stump(), b=[-4.595], theta_a=[[2.0, 0.0], [0.0, 2.0]])
    val = static_dataset(np.zeros((5, 1)), np.zeros(5))
    masses = leaf_masses(pol, val)
    assert masses[2] == pytest.approx(0.01, abs=1e-3)
    events = []
    out = prune_low_probability(pol, val, 0.05, events)
    assert out.topology.n_leaves == 1
    np.testing.assert_array_equal(out.params["theta_a"], [[2.0, 0.0]])
    assert events[0].event == "prune" and events[0].node_id == 2 and events[0].kept_child == 1


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.4))
def test_prune_leaves_meet_threshold(seed, p_min):
    rng = np.random.default_rng(seed)
    pol = random_policy(TreeTopology.complete(3), 2, 2, 0, "fixed_tanh", scale=3.0, rng=rng)
    val = static_dataset(rng.standard_normal((30, 2)), np.zeros(30))
    out = prune_low_probability(pol, val, p_min)
    masses = leaf_masses(out, val)
    assert out.topology.n_leaves <= pol.topology.n_leaves
    assert out.topology.n_leaves == 1 or min(masses.values()) >= p_min


def test_collapse_keeps_subtree_params(rng):
    pol = random_policy(TreeTopology.complete(2), 1, 2, 0, "fixed_tanh", scale=1.0, rng=rng)
    out = collapse_node(pol, 0, 2)
    assert out.topology.n_leaves == 2 and out.topology.root == 2
    np.testing.assert_array_equal(out.inner(2).w, pol.inner(2).w)
    np.testing.assert_array_equal(out.leaf(6).theta_a, pol.leaf(6).theta_a)


def test_grow_separable_stays_depth_two(rng):
    X = rng.choice([-1.0, 1.0], (300, 2))
    y = (X[:, 0] > 0).astype(int)
    train, val = static_dataset(X[:240], y[:240]), static_dataset(X[240:], y[240:])
    res = grow(train, val, GrowthConfig(max_depth=4), quick_training(max_epochs=60), rng, hist_dim=0)
    assert res.policy.topology.depth <= 2
    assert all(ev.event != "split" for ev in res.events)


@pytest.fixture(scope="module")
def grown_intervals():
    rng = np.random.default_rng(0)
    train, val, test = intervals(600, 6, rng), intervals(200, 6, rng), intervals(300, 6, rng)
    return grow(train, val, GrowthConfig(max_depth=4), quick_training(), rng, hist_dim=0), test


def test_grow_needs_depth(grown_intervals):
    res, test = grown_intervals
    assert res.unpruned.topology.depth >= 3
    assert soft_accuracy(res.policy, test) >= 0.95


def test_growth_log_invariants(grown_intervals, tmp_path):
    res, _ = grown_intervals
    best = -np.inf
    for ev in res.events:
        assert ev.depth <= 4
        if ev.event == "split":
            assert ev.val_auroc_after > ev.val_auroc_before >= best
            best = ev.val_auroc_after
    assert replay_topology(res.events, 2, 4).to_dict() == res.policy.topology.to_dict()
    write_events(res.events, tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in open(tmp_path / "log.jsonl")]
    assert {"event", "node_id", "depth", "val_auroc_before", "val_auroc_after"} <= set(rows[0])


def test_grow_rejects_empty():
    with pytest.raises(DataError):
        grow([], [], GrowthConfig(), quick_training())


def test_event_json():
    ev = GrowthEvent("reject", 4, 2, 0.9, None, "max_depth")
    assert json.loads(ev.to_json())["reason"] == "max_depth"
