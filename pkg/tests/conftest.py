import numpy as np
import pytest
from hypothesis import settings

from poetree.data import Normalizer, Trajectory
from poetree.tree import Gating, RecurrenceModel, TreePolicy, TreeTopology, param_shapes

settings.register_profile("default", deadline=None, max_examples=50)
settings.load_profile("default")


def logit(p):
    return float(np.log(p / (1 - p)))


def build_policy(topology, D=1, K=2, M=0, recurrence=RecurrenceModel.FIXED_TANH, gating=Gating.OBLIQUE,
                 normalizer=None, **overrides):
    """Policy with all-zero parameters, then selected arrays overridden."""
    shapes = param_shapes(topology.n_inner, topology.n_leaves, D, K, M, RecurrenceModel(recurrence), Gating(gating))
    params = {k: np.zeros(s) for k, s in shapes.items()}
    for k, v in overrides.items():
        params[k] = np.asarray(v, dtype=float).reshape(shapes[k])
    return TreePolicy(topology, params, D, K, M, normalizer or Normalizer.identity(D), recurrence, gating)


def chain_topology():
    """Root 0 -> (1, 2); node 2 -> (3, 4). Leaves in id order: 1, 3, 4."""
    topo, _, _ = TreeTopology.single_leaf().split(0)
    topo, _, _ = topo.split(2)
    return topo


def stump():
    topo, _, _ = TreeTopology.single_leaf().split(0)
    return topo


def static_dataset(X, y, prefix="s"):
    return [Trajectory(np.asarray(x, dtype=float)[None], np.array([int(a)]), f"{prefix}{i}") for i, (x, a) in enumerate(zip(X, y))]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not getattr(mod, "RESULTS", None):
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(mod.RESULTS):
        terminalreporter.write_line(mod.RESULTS[n])
