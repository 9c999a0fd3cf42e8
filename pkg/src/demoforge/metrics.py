"""Kinematic quality metrics over demonstration episodes.

States are min-max normalized per dimension with dataset-wide extrema, then
differentiated with centered finite differences. All profiles are reported
on the rows where the third difference is defined: 0-indexed ``3 .. T-4``
(equivalently 1-indexed ``4 .. T-3``), which is ``T - 6`` rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .episode import Episode
from .errors import DimMismatch, EmptyDataset, TooShort

MIN_LENGTH = 7
DEFAULT_COVERAGE_PER_DIM = 0.05


@dataclass(frozen=True)
class NormalizationStats:
    per_dim_min: np.ndarray
    per_dim_max: np.ndarray
    scope: str = "dataset"

    def __post_init__(self) -> None:
        lo = np.asarray(self.per_dim_min, dtype=np.float64)
        hi = np.asarray(self.per_dim_max, dtype=np.float64)
        if lo.shape != hi.shape or lo.ndim != 1:
            raise DimMismatch("min/max vectors must be 1-D and equal length")
        if np.any(lo > hi):
            raise ValueError("per_dim_min must not exceed per_dim_max")
        object.__setattr__(self, "per_dim_min", lo)
        object.__setattr__(self, "per_dim_max", hi)

    @property
    def dims(self) -> int:
        return self.per_dim_min.shape[0]

    @property
    def zero_range(self) -> np.ndarray:
        return self.per_dim_max == self.per_dim_min

    def to_dict(self) -> dict:
        return {
            "scope": self.scope,
            "per_dim_min": self.per_dim_min.tolist(),
            "per_dim_max": self.per_dim_max.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NormalizationStats":
        return cls(np.array(d["per_dim_min"]), np.array(d["per_dim_max"]), d.get("scope", "dataset"))


@dataclass(frozen=True)
class KinematicsProfile:
    velocity: np.ndarray
    acceleration: np.ndarray
    jerk: np.ndarray
    valid_range: tuple[int, int]  # 1-indexed, inclusive


@dataclass(frozen=True)
class SmoothnessScores:
    a_ep: float
    j_ep: float
    coverage: float


def compute_normalization_stats(episodes: Sequence[Episode]) -> NormalizationStats:
    if len(episodes) == 0:
        raise EmptyDataset("cannot compute normalization stats of an empty dataset")
    dims = {ep.dims for ep in episodes}
    if len(dims) != 1:
        raise DimMismatch(f"episodes disagree on state dimension: {sorted(dims)}")
    lo = np.min([ep.states.min(axis=0) for ep in episodes], axis=0)
    hi = np.max([ep.states.max(axis=0) for ep in episodes], axis=0)
    return NormalizationStats(lo, hi)


def normalize_states(states: np.ndarray, stats: NormalizationStats) -> np.ndarray:
    states = np.asarray(states, dtype=np.float64)
    if states.ndim != 2 or states.shape[1] != stats.dims:
        raise DimMismatch(f"states have shape {states.shape}, stats cover {stats.dims} dims")
    span = stats.per_dim_max - stats.per_dim_min
    safe = np.where(stats.zero_range, 1.0, span)
    out = (states - stats.per_dim_min) / safe
    out[:, stats.zero_range] = 0.0
    return out


def normalize(episode: Episode, stats: NormalizationStats) -> np.ndarray:
    return normalize_states(episode.states, stats)


def _centered(x: np.ndarray, dt: float) -> np.ndarray:
    # row i of the result is the derivative at row i + 1 of x
    return (x[2:] - x[:-2]) / (2.0 * dt)


def kinematics(normalized_states: np.ndarray, dt: float) -> KinematicsProfile:
    s = np.asarray(normalized_states, dtype=np.float64)
    if s.ndim != 2:
        raise DimMismatch("expected a T x D array")
    T = s.shape[0]
    if T < MIN_LENGTH:
        raise TooShort(f"need T >= {MIN_LENGTH} for the third-difference stencil, got {T}")
    if not dt > 0:
        raise ValueError("dt must be positive")
    v = _centered(s, dt)  # rows 1 .. T-2
    a = _centered(v, dt)  # rows 2 .. T-3
    j = _centered(a, dt)  # rows 3 .. T-4
    return KinematicsProfile(
        velocity=v[2:-2],
        acceleration=a[1:-1],
        jerk=j,
        valid_range=(4, T - 3),
    )


def coverage(normalized_states: np.ndarray) -> float:
    """Total variation of the normalized path, summed over dimensions."""
    s = np.asarray(normalized_states, dtype=np.float64)
    return float(np.abs(np.diff(s, axis=0)).sum())


def smoothness_scores(profile: KinematicsProfile, normalized_states: np.ndarray) -> SmoothnessScores:
    a, j = profile.acceleration, profile.jerk
    if a.shape != j.shape or a.ndim != 2:
        raise DimMismatch("acceleration and jerk must be matching 2-D arrays")
    if np.asarray(normalized_states).shape[0] - 6 != a.shape[0]:
        raise DimMismatch("profile does not match the episode length")
    return SmoothnessScores(
        a_ep=float(np.sqrt(np.mean(a * a))),
        j_ep=float(np.sqrt(np.mean(j * j))),
        coverage=coverage(normalized_states),
    )


def episode_scores(episode: Episode, stats: NormalizationStats) -> SmoothnessScores:
    s = normalize(episode, stats)
    return smoothness_scores(kinematics(s, episode.dt), s)


def coverage_threshold(dims: int, per_dim: float = DEFAULT_COVERAGE_PER_DIM) -> float:
    return per_dim * dims


def coverage_eligible(scores: SmoothnessScores, dims: int,
                      per_dim: float = DEFAULT_COVERAGE_PER_DIM) -> bool:
    return scores.coverage >= coverage_threshold(dims, per_dim)
