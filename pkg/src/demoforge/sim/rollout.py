"""Open-loop replay and closed-loop chunked policy rollouts."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np

from ..episode import Episode
from ..errors import TaskMismatch
from ..metrics import NormalizationStats, episode_scores, kinematics, normalize_states, smoothness_scores
from .expert import simulate
from .tasks import TaskSpec
from .world import ACTION_DIM, STATE_DIM, WorldState, step

UNIT_STATS = NormalizationStats(np.zeros(STATE_DIM), np.ones(STATE_DIM))


@dataclass
class ReplayResult:
    success: bool
    collision_free: bool
    final_state: WorldState
    states: np.ndarray


def replay(episode: Episode, spec: TaskSpec) -> ReplayResult:
    """Apply the recorded actions open-loop from the task's canonical initial state."""
    if episode.task_id != spec.task_id:
        raise TaskMismatch(f"episode is for {episode.task_id!r}, spec is {spec.task_id!r}")
    if episode.dims != ACTION_DIM:
        raise TaskMismatch(f"simulator expects {ACTION_DIM}-D episodes, got {episode.dims}")
    states, trace = simulate(spec, episode.actions)
    final = trace[-1]
    return ReplayResult(spec.success(final), not final.collided, final, states)


class ChunkPolicy(Protocol):
    chunk_length: int

    def act(self, states: np.ndarray, obs: np.ndarray, instructions: Sequence[str],
            seeds: Sequence[int]) -> np.ndarray:
        """Return a (B, chunk_length, 6) block of actions for B environments."""


class ReplayPolicy:
    """Feeds back recorded actions chunk by chunk, then holds still."""

    def __init__(self, episode: Episode, chunk_length: int = 32):
        self.episode = episode
        self.chunk_length = chunk_length
        self._cursor = 0

    def act(self, states, obs, instructions, seeds):
        A = self.episode.actions
        out = np.zeros((len(states), self.chunk_length, A.shape[1]))
        hold = A[-1].copy()
        hold[[0, 1, 3, 4]] = 0.0
        for k in range(self.chunk_length):
            i = self._cursor + k
            out[:, k] = A[i] if i < len(A) else hold
        self._cursor += self.chunk_length
        return out


@dataclass
class RolloutResult:
    success: bool
    collision_free: bool
    a_ep: float
    j_ep: float
    steps: int
    states: np.ndarray = field(repr=False)


def rollout_many(policy: ChunkPolicy, specs: Sequence[TaskSpec], seeds: Sequence[int],
                 stats: NormalizationStats = UNIT_STATS, stop_on_success: bool = True,
                 max_steps: int | None = None, dt: float = 0.05) -> list[RolloutResult]:
    """Closed-loop execution in lock-step: every L steps all live environments re-plan together."""
    worlds = [s.initial_state() for s in specs]
    traces: list[list[np.ndarray]] = [[w.joint_vector()] for w in worlds]
    done = [False] * len(specs)
    limits = [max_steps or s.max_steps for s in specs]
    rounds = 0
    while not all(done):
        live = [i for i, d in enumerate(done) if not d]
        states = np.array([worlds[i].joint_vector() for i in live])
        obs = np.array([worlds[i].obs_features() for i in live])
        chunk = policy.act(states, obs, [specs[i].instruction for i in live],
                           [int(seeds[i]) * 1000 + rounds for i in live])
        rounds += 1
        for row, i in enumerate(live):
            for a in chunk[row]:
                worlds[i] = step(worlds[i], a)
                traces[i].append(worlds[i].joint_vector())
                if (stop_on_success and specs[i].success(worlds[i])) or worlds[i].step_count >= limits[i]:
                    done[i] = True
                    break
    out = []
    for i, spec in enumerate(specs):
        S = np.array(traces[i])
        s = normalize_states(S, stats)
        sc = smoothness_scores(kinematics(s, dt), s)
        out.append(RolloutResult(spec.success(worlds[i]), not worlds[i].collided, sc.a_ep, sc.j_ep,
                                 worlds[i].step_count, S))
    return out


def rollout_policy(policy: ChunkPolicy, spec: TaskSpec, seed: int, **kw) -> RolloutResult:
    return rollout_many(policy, [spec], [seed], **kw)[0]
