"""Synthetic partially observable treatment environment with a scripted expert.

Patients carry a hidden binary disease state. Each visit yields a noisy
diagnostic test (dimension 0) plus irrelevant Gaussian measurements. The
expert treats whenever any of the last three tests came back positive;
treatment cures a diseased patient with fixed probability before the next
visit. Nothing else ever changes the disease state.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .data import Trajectory

POSITIVE = 1
NEGATIVE = 0
TREAT = 1
NO_TREAT = 0


@dataclass(frozen=True)
class SynthConfig:
    n_patients: int = 1000
    horizon: int = 9
    p_init_diseased: float = 0.8
    treatment_efficacy: float = 0.4
    test_precision: float = 0.99  # P(positive test | diseased)
    false_alarm: float = 0.05  # P(positive test | healthy)
    n_noise_dims: int = 10
    expert_window: int = 3
    seed: int = 0

    def __post_init__(self):
        for name in ("p_init_diseased", "treatment_efficacy", "test_precision", "false_alarm"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be a probability, got {value}")
        if self.expert_window < 1:
            raise ValueError("expert_window must be >= 1")
        if self.horizon < self.expert_window:
            raise ValueError("horizon must be at least the expert window")
        if self.n_patients < 1 or self.n_noise_dims < 0:
            raise ValueError("n_patients must be positive and n_noise_dims non-negative")

    @property
    def obs_dim(self) -> int:
        return 1 + self.n_noise_dims


def expert_action(window: Sequence[int]) -> int:
    """Treat iff any test in the window (the last <=3 results) was positive."""
    if not 1 <= len(window) <= 3:
        raise ValueError(f"window length must be in 1..3, got {len(window)}")
    return TREAT if any(int(x) == POSITIVE for x in window) else NO_TREAT


def generate_dataset(config: SynthConfig = SynthConfig()) -> list[Trajectory]:
    """Simulate ``config.n_patients`` trajectories; bit-reproducible for a fixed seed."""
    rng = np.random.default_rng(config.seed)
    n, horizon = config.n_patients, config.horizon
    diseased = rng.random(n) < config.p_init_diseased
    hidden = np.zeros((n, horizon), dtype=int)
    tests = np.zeros((n, horizon), dtype=int)
    actions = np.zeros((n, horizon), dtype=int)
    noise = np.zeros((n, horizon, config.n_noise_dims))
    for t in range(horizon):
        hidden[:, t] = diseased
        p_pos = np.where(diseased, config.test_precision, config.false_alarm)
        tests[:, t] = rng.random(n) < p_pos
        noise[:, t] = rng.standard_normal((n, config.n_noise_dims))
        lo = max(0, t - config.expert_window + 1)
        actions[:, t] = tests[:, lo : t + 1].max(axis=1)
        # treatment at t acts before the test at t+1
        cured = diseased & (actions[:, t] == TREAT) & (rng.random(n) < config.treatment_efficacy)
        diseased = diseased & ~cured
    observations = np.concatenate([tests[:, :, None].astype(float), noise], axis=2)
    return [
        Trajectory(observations=observations[i], actions=actions[i], id=f"patient-{i:05d}", hidden=hidden[i])
        for i in range(n)
    ]


def summary(trajectories: Sequence[Trajectory]) -> dict:
    hidden = [tr.hidden for tr in trajectories if tr.hidden is not None]
    actions = np.concatenate([tr.actions for tr in trajectories])
    out = {
        "n_trajectories": len(trajectories),
        "n_steps": int(actions.size),
        "action_rate": float(actions.mean()),
    }
    if hidden:
        out["prevalence"] = float(np.concatenate(hidden).mean())
    return out
