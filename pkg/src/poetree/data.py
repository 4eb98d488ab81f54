"""Demonstration trajectories, normalization statistics and padded batches."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    """Raised for malformed or non-finite demonstration data."""


@dataclass(frozen=True)
class Trajectory:
    """One demonstrated episode: ``observations[t]`` was seen, ``actions[t]`` was taken."""

    observations: np.ndarray
    actions: np.ndarray
    id: str = ""
    hidden: Optional[np.ndarray] = None

    def __post_init__(self):
        obs = np.asarray(self.observations, dtype=float)
        act = np.asarray(self.actions, dtype=int)
        if obs.ndim != 2:
            raise DataError(f"trajectory {self.id!r}: observations must be 2-D, got shape {obs.shape}")
        if act.ndim != 1 or len(act) != len(obs):
            raise DataError(f"trajectory {self.id!r}: {len(obs)} observations but {act.shape} actions")
        if len(obs) == 0:
            raise DataError(f"trajectory {self.id!r} is empty")
        if not np.all(np.isfinite(obs)):
            raise DataError(f"trajectory {self.id!r}: non-finite observation entries")
        object.__setattr__(self, "observations", obs)
        object.__setattr__(self, "actions", act)
        if self.hidden is not None:
            object.__setattr__(self, "hidden", np.asarray(self.hidden, dtype=int))

    def __len__(self) -> int:
        return len(self.actions)

    @property
    def obs_dim(self) -> int:
        return self.observations.shape[1]


@dataclass(frozen=True)
class Normalizer:
    """Per-dimension z-score statistics."""

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        std = np.asarray(self.std, dtype=float)
        if mean.shape != std.shape or mean.ndim != 1:
            raise DataError("normalizer mean/std must be 1-D vectors of equal length")
        if np.any(~(std > 0)):
            raise DataError("normalizer standard deviations must be strictly positive")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls, dim: int) -> "Normalizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, trajectories: Sequence[Trajectory], min_std: float = 1e-6) -> "Normalizer":
        stacked = np.concatenate([tr.observations for tr in trajectories], axis=0)
        std = stacked.std(axis=0)
        # constant columns would otherwise divide by zero
        std = np.where(std < min_std, 1.0, std)
        return cls(stacked.mean(axis=0), std)

    def transform(self, z: np.ndarray) -> np.ndarray:
        return (np.asarray(z, dtype=float) - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return np.asarray(z, dtype=float) * self.std + self.mean


@dataclass
class Batch:
    """Trajectories padded to a common length.

    ``z`` holds *normalized* observations of shape (B, T, D), ``actions`` (B, T)
    and ``mask`` (B, T) marks real steps.
    """

    z: np.ndarray
    actions: np.ndarray
    mask: np.ndarray
    lengths: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.lengths is None:
            self.lengths = self.mask.sum(axis=1).astype(int)

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def horizon(self) -> int:
        return self.z.shape[1]


def make_batch(trajectories: Sequence[Trajectory], normalizer: Normalizer) -> Batch:
    if len(trajectories) == 0:
        raise DataError("empty batch")
    dims = {tr.obs_dim for tr in trajectories}
    if len(dims) != 1:
        raise DataError(f"inconsistent observation dimensions in batch: {sorted(dims)}")
    (dim,) = dims
    if dim != len(normalizer.mean):
        raise DataError(f"observations have {dim} dims, normalizer expects {len(normalizer.mean)}")
    horizon = max(len(tr) for tr in trajectories)
    n = len(trajectories)
    z = np.zeros((n, horizon, dim))
    actions = np.zeros((n, horizon), dtype=int)
    mask = np.zeros((n, horizon))
    for i, tr in enumerate(trajectories):
        tau = len(tr)
        z[i, :tau] = normalizer.transform(tr.observations)
        actions[i, :tau] = tr.actions
        mask[i, :tau] = 1.0
    return Batch(z=z, actions=actions, mask=mask)


def feature_ranges(trajectories: Sequence[Trajectory]) -> tuple[np.ndarray, np.ndarray]:
    """Raw-unit (min, max) per observation dimension."""
    stacked = np.concatenate([tr.observations for tr in trajectories], axis=0)
    return stacked.min(axis=0), stacked.max(axis=0)


def train_val_split(trajectories: Sequence[Trajectory], val_frac: float, rng: np.random.Generator):
    """Random split; the validation part gets ``round(val_frac * n)`` items, at least one."""
    n = len(trajectories)
    if n < 2:
        raise DataError("need at least two trajectories to split")
    n_val = min(n - 1, max(1, int(round(val_frac * n))))
    order = rng.permutation(n)
    val = [trajectories[i] for i in sorted(order[:n_val])]
    train = [trajectories[i] for i in sorted(order[n_val:])]
    return train, val
