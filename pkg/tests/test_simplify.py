import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import build_policy, chain_topology, logit, stump
from poetree.data import Normalizer
from poetree.simplify import (
    AxisLeaf,
    AxisNode,
    adjust_threshold_with_evolution,
    marginalize_history,
    prune_axis_aligned,
    soft_and_gate,
    to_axis_aligned,
)
from poetree.tree import Gating, TreeTopology, evaluate_gates, hard_forward_step, random_policy, rollout_batch, sigmoid


def test_zero_history_keeps_bias():
    pol = build_policy(stump(), D=1, M=2, w=[[3.0, -1.0, 2.0]], b=[0.4])
    assert marginalize_history(pol, np.zeros(2)).b_prime[0] == 0.4


def test_history_dot_product():
    pol = build_policy(stump(), D=1, M=3, w=[[1.0, 0.0, 0.0, 1.0]], b=[0.0])
    assert marginalize_history(pol, [0.5, 0.2, -0.1]).b_prime[0] == pytest.approx(0.5)


@given(st.integers(0, 2**31 - 1), st.sampled_from(list(Gating)))
def test_marginalization_exact(seed, gating):
    rng = np.random.default_rng(seed)
    pol = random_policy(TreeTopology.complete(2), 3, 3, 2, "matrix_hist", gating, scale=1.5, rng=rng)
    h, z = np.tanh(rng.standard_normal(2)), rng.standard_normal(3)
    m = marginalize_history(pol, h)
    np.testing.assert_allclose(m.gate_probabilities(z)[0], evaluate_gates(pol, np.r_[h, z]).g[0], atol=1e-12)
    soft = rollout_batch(pol, z[None, None], "soft")  # h = 0 at t = 1
    m0 = marginalize_history(pol, np.zeros(2))
    np.testing.assert_allclose(m0.action_distribution(z)[0], soft.action_dist[0, 0], atol=1e-12)


def test_threshold_positive_weight():
    pol = build_policy(stump(), D=2, w=[[2.0, 0.5]], b=[-1.0])
    node = to_axis_aligned(pol, [], 1).nodes[0]
    assert (node.feature, node.direction) == (0, ">")
    assert node.threshold_normalized == pytest.approx(0.5)


def test_threshold_sign_flip():
    pol = build_policy(stump(), D=1, w=[[-3.0]], b=[-1.5])
    node = to_axis_aligned(pol, [], 1).nodes[0]
    assert node.direction == "<" and node.threshold == pytest.approx(-0.5)


def test_threshold_denormalized():
    norm = Normalizer(np.array([10.0]), np.array([4.0]))
    pol = build_policy(stump(), D=1, w=[[2.0]], b=[-1.0], normalizer=norm)
    node = to_axis_aligned(pol, [], 1).nodes[0]
    assert node.threshold_normalized == pytest.approx(0.5)
    assert node.threshold == pytest.approx(12.0)


def test_evolution_adjusted_threshold():
    pol = build_policy(stump(), D=2, w=[[2.0, 1.0]], b=[-1.0])
    node = adjust_threshold_with_evolution(pol, [], [9.0, 0.5], 1).nodes[0]
    assert node.threshold_normalized == pytest.approx(0.25)


@given(st.integers(0, 2**31 - 1))
def test_evolution_reduces_to_plain(seed):
    rng = np.random.default_rng(seed)
    pol = random_policy(TreeTopology.complete(2), 3, 2, 2, "rnn", scale=1.0, rng=rng)
    h = np.tanh(rng.standard_normal(2))
    a = to_axis_aligned(pol, h).to_dict()
    assert adjust_threshold_with_evolution(pol, h, np.zeros(3)).to_dict() == a
    one = random_policy(TreeTopology.complete(2), 1, 2, 2, "rnn", scale=1.0, rng=rng)
    assert adjust_threshold_with_evolution(one, h, rng.standard_normal(1)).to_dict() == to_axis_aligned(one, h).to_dict()


@given(st.floats(-5, 5), st.floats(0.1, 10), st.booleans(), st.integers(0, 3))
def test_axis_aligned_node_is_fixed_point(b, scale, negative, feature):
    w = np.zeros(4)
    w[feature] = -scale if negative else scale
    pol = build_policy(stump(), D=4, w=w, b=[b])
    node = to_axis_aligned(pol, []).nodes[0]
    assert node.feature == feature
    assert node.threshold == pytest.approx(-b / w[feature], abs=1e-9)
    # re-encode the extracted test as weights and convert again
    again = build_policy(stump(), D=4, w=w, b=[-node.threshold * w[feature]])
    assert to_axis_aligned(again, []).nodes[0].threshold == pytest.approx(node.threshold, abs=1e-9)


def test_degenerate_node_flagged():
    pol = build_policy(stump(), D=2, w=[[0.0, 0.0]], b=[0.3])
    tree = to_axis_aligned(pol, [])
    assert tree.degenerate_ids == [0] and tree.notes
    assert tree.decide([100.0, -100.0]) == 2


def test_leaf_labels():
    pol = build_policy(stump(), theta_a=[[0.0, logit(0.8)], [1.0, 0.0]])
    tree = to_axis_aligned(pol, [])
    assert tree.nodes[1].action == 1 and tree.nodes[1].probability == pytest.approx(0.8)
    assert tree.nodes[2].action == 0


def test_soft_and_values():
    assert soft_and_gate([0, 0], [0, 0], [3.0, -2.0]) == pytest.approx(0.25)
    assert soft_and_gate([1, 1], [80, 0], [0.0, 1.0]) == pytest.approx(float(sigmoid(1.0)), abs=1e-12)
    assert soft_and_gate([2.0], [0.5], [0.3]) == pytest.approx(float(sigmoid(1.1)), abs=1e-15)


def test_prune_out_of_range():
    pol = build_policy(stump(), D=1, w=[[1.0]], b=[2.0])  # z > -2
    out = prune_axis_aligned(to_axis_aligned(pol, []), (np.array([0.0]), np.array([1.0])))
    assert out.root == 2 and out.n_leaves == 1


def test_prune_contradiction():
    # root: z > 0.7; node 2 (right child): z < 0.3
    pol = build_policy(chain_topology(), D=1, w=[[1.0], [-1.0]], b=[-0.7, 0.3])
    tree = to_axis_aligned(pol, [])
    assert tree.nodes[2].direction == "<" and tree.nodes[2].threshold == pytest.approx(0.3)
    out = prune_axis_aligned(tree, (np.array([-5.0]), np.array([5.0])))
    assert out.nodes[0].right == 3
    assert sorted(out.leaf_ids) == [1, 3]


def test_prune_by_mass_keeps_majority():
    pol = build_policy(chain_topology(), D=1, w=[[1.0], [1.0]], b=[0.0, -2.0])
    obs = np.concatenate([np.full((90, 1), -1.0), np.full((8, 1), 1.0), np.full((2, 1), 3.0)])
    out = prune_axis_aligned(to_axis_aligned(pol, []), (np.array([-5.0]), np.array([5.0])), obs, 0.05)
    assert sorted(out.leaf_ids) == [1, 3]
    assert out.predict([-1.0]) == out.nodes[1].action


@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.5))
def test_prune_properties(seed, p_min):
    rng = np.random.default_rng(seed)
    pol = random_policy(TreeTopology.complete(3), 2, 2, 0, "fixed_tanh", scale=2.0, rng=rng)
    tree = to_axis_aligned(pol, [])
    obs = rng.standard_normal((40, 2))
    masses = tree.leaf_masses(obs)
    top = max(masses, key=lambda nid: (masses[nid], -nid))
    out = prune_axis_aligned(tree, (obs.min(0), obs.max(0)), obs, p_min)
    assert out.n_leaves <= tree.n_leaves
    assert out.decide(obs[np.argmax([tree.decide(z) == top for z in obs])]) == top
    assert all(isinstance(out.nodes[n], AxisLeaf) for n in out.leaf_ids)
    assert all(isinstance(out.nodes[n], AxisNode) for n in out.inner_ids)


def test_saturated_tree_matches_hard_traversal():
    rng = np.random.default_rng(0)
    topo = TreeTopology.complete(3)
    D = 4
    w = 0.01 * rng.standard_normal((topo.n_inner, D))
    w[np.arange(topo.n_inner), rng.integers(0, D, topo.n_inner)] = rng.choice([-20.0, 20.0], topo.n_inner)
    pol = build_policy(topo, D=D, K=3, w=w, b=rng.standard_normal(topo.n_inner) * 5,
                       theta_a=rng.standard_normal((topo.n_leaves, 3)))
    tree = to_axis_aligned(pol, [])
    zs = rng.standard_normal((2000, D))
    agree = np.mean([tree.decide(z) == hard_forward_step(pol, [], z).leaf_id for z in zs])
    assert agree >= 0.99
