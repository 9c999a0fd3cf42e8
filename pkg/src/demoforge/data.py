"""Learning-side views of episodes: per-step observations, embeddings, chunks."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .episode import Episode
from .sim.expert import simulate
from .sim.tasks import task_from_id

INSTR_DIM = 32


@lru_cache(maxsize=None)
def _instruction_vec(text: str, dim: int) -> bytes:
    seed = int.from_bytes(hashlib.sha256(text.encode()).digest()[:8], "little")
    v = np.random.default_rng(seed).normal(size=dim)
    return (v / np.linalg.norm(v)).tobytes()


def instruction_embedding(text: str, dim: int = INSTR_DIM) -> np.ndarray:
    """Deterministic stand-in for a text encoder: hash-seeded unit vector."""
    return np.frombuffer(_instruction_vec(text, dim), dtype=np.float64).copy()


@dataclass
class EpisodeArrays:
    episode_id: str
    states: np.ndarray  # (T, D)
    actions: np.ndarray  # (T, D)
    obs: np.ndarray  # (T, OBS_DIM), world features before each action
    instruction: np.ndarray  # (INSTR_DIM,)

    @property
    def T(self) -> int:
        return len(self.states)


def episode_arrays(ep: Episode) -> EpisodeArrays:
    spec = task_from_id(ep.task_id)
    _, trace = simulate(spec, ep.actions)
    obs = np.array([w.obs_features() for w in trace[:-1]])
    return EpisodeArrays(ep.episode_id, ep.states, ep.actions, obs, instruction_embedding(ep.instruction))


def hold_action(last: np.ndarray) -> np.ndarray:
    a = np.array(last, dtype=np.float64)
    a[[0, 1, 3, 4]] = 0.0
    return a


def action_chunk(actions: np.ndarray, start: int, length: int) -> np.ndarray:
    """Rows ``start .. start+length-1`` (0-indexed), padded past the end with a hold command."""
    out = actions[start:start + length]
    if len(out) < length:
        pad = np.repeat(hold_action(actions[-1])[None], length - len(out), axis=0)
        out = np.concatenate([out, pad], axis=0)
    return out


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, rows: np.ndarray) -> "Standardizer":
        mu = rows.mean(axis=0)
        sd = rows.std(axis=0)
        return cls(mu, np.where(sd > 1e-12, sd, 1.0))

    def forward(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean) / self.std

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return z * self.std + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"]), np.array(d["std"]))
