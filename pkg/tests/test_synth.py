import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poetree.synth import SynthConfig, expert_action, generate_dataset, summary


def test_expert_examples():
    assert expert_action([0]) == 0
    assert expert_action([0, 0, 0]) == 0
    assert expert_action([0, 1, 0]) == 1
    assert expert_action([1, 0, 0]) == 1


@pytest.mark.parametrize("window", list(itertools.product([0, 1], repeat=3)))
def test_expert_exhaustive(window):
    assert expert_action(window) == int(any(window))


def test_expert_window_length():
    with pytest.raises(ValueError):
        expert_action([])
    with pytest.raises(ValueError):
        expert_action([0, 0, 0, 1])


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(test_precision=1.2)
    with pytest.raises(ValueError):
        SynthConfig(horizon=2)


def test_shapes_and_encoding():
    data = generate_dataset(SynthConfig(n_patients=20, seed=3))
    assert len(data) == 20
    for tr in data:
        assert tr.observations.shape == (9, 11)
        assert set(np.unique(tr.observations[:, 0])) <= {0.0, 1.0}
        assert len(tr.hidden) == len(tr.actions) == 9


def test_actions_follow_expert_rule():
    for tr in generate_dataset(SynthConfig(n_patients=200, seed=1)):
        tests = tr.observations[:, 0].astype(int)
        for t in range(len(tr)):
            assert tr.actions[t] == expert_action(tests[max(0, t - 2) : t + 1])


def test_single_positive_at_start():
    # find a patient whose only positive test is at t = 1
    data = generate_dataset(SynthConfig(n_patients=3000, seed=0))
    tr = next(tr for tr in data if tr.observations[:, 0].tolist()[:4] == [1, 0, 0, 0])
    assert tr.actions[:4].tolist() == [1, 1, 1, 0]


def test_reproducible():
    a = generate_dataset(SynthConfig(n_patients=50, seed=9))
    b = generate_dataset(SynthConfig(n_patients=50, seed=9))
    for x, y in zip(a, b):
        assert np.array_equal(x.observations, y.observations) and np.array_equal(x.actions, y.actions)
    c = generate_dataset(SynthConfig(n_patients=50, seed=10))
    assert not np.array_equal(a[0].observations, c[0].observations)


def test_false_alarm_rate():
    data = generate_dataset(SynthConfig(n_patients=250_000, n_noise_dims=0, seed=0))
    tests = np.concatenate([tr.observations[:, 0] for tr in data])
    healthy = np.concatenate([tr.hidden for tr in data]) == 0
    assert healthy.sum() > 1_000_000
    assert tests[healthy].mean() == pytest.approx(0.05, abs=1e-3)


@given(st.integers(0, 2**31 - 1))
def test_no_spontaneous_infection(seed):
    for tr in generate_dataset(SynthConfig(n_patients=30, n_noise_dims=0, seed=seed)):
        assert np.all(np.diff(tr.hidden) <= 0)
        cured = np.flatnonzero(np.diff(tr.hidden) < 0)
        assert np.all(tr.actions[cured] == 1)


def test_prevalence_non_increasing():
    data = generate_dataset(SynthConfig(n_patients=5000, seed=2))
    prevalence = np.mean([tr.hidden for tr in data], axis=0)
    assert np.all(np.diff(prevalence) <= 0)
    assert prevalence[0] == pytest.approx(0.8, abs=0.02)


def test_summary():
    s = summary(generate_dataset(SynthConfig(n_patients=10, seed=0)))
    assert s["n_trajectories"] == 10 and s["n_steps"] == 90
    assert 0 <= s["prevalence"] <= 1
