"""Clip-level quality discriminator trained positive-vs-unlabeled.

Each clip becomes a token sequence ``[state; a_t .. a_{t+L-1}; log-pi proxy]``
with learned positional embeddings; instruction and scene-entity tokens are
appended as a condition stream and the whole sequence goes through a shallow
non-causal transformer. Hidden tokens are averaged, fed to a small MLP head
and squashed by a sigmoid, then clamped to ``[0.1, 0.9]``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Protocol, Sequence

import numpy as np

from .curation import SCORE_MAX, SCORE_MIN
from .data import INSTR_DIM, EpisodeArrays, Standardizer
from .errors import (ChunkLongerThanEpisode, EmptyBatchSide, MissingCheckpoint, NoPositives,
                     ScoreOutOfRange, ShapeMismatch, SingleClip)
from .nn import (AdamWState, Block, Checkpoint, F, LayerNorm, Linear, MLP, Module, Tensor, adamw_step,
                 clip_grad_norm, collect_grads, load_checkpoint, no_grad, save_checkpoint)
from .nn.layers import param, trunc_normal
from .policy import DiffusionPolicy, forward_diffuse
from .sim.expert import seed_for
from .sim.world import ENTITY_DIM, N_ENTITIES

ENERGY_STEPS = (10, 50, 90)
ZSCORE_EPS = 1e-8
PU_ETA = 0.5


@dataclass
class DiscConfig:
    layers: int = 2
    hidden: int = 64
    heads: int = 4
    mlp_ratio: float = 3.0
    chunk_length: int = 32
    state_dim: int = 6
    action_dim: int = 6
    n_entities: int = N_ENTITIES
    entity_dim: int = ENTITY_DIM
    instr_dim: int = INSTR_DIM


DISC_PRESETS = {
    "paper": DiscConfig(layers=12, hidden=512, heads=8),
    "desk": DiscConfig(layers=2, hidden=64, heads=4),
}


@dataclass
class Clip:
    episode_id: str
    start: int  # 1-indexed first row of the chunk
    state: np.ndarray
    actions: np.ndarray  # (L, D)
    obs: np.ndarray
    instruction: np.ndarray
    logpi: float = 0.0


# -- clip sampling and the log-pi proxy ------------------------------------------
def sample_subclips(ep: EpisodeArrays, K: int, L: int, seed: int) -> list[Clip]:
    """Up to ``K`` distinct starts drawn uniformly from ``1 .. T-L+1`` (sorted)."""
    if L > ep.T:
        raise ChunkLongerThanEpisode(f"{ep.episode_id}: L={L} > T={ep.T}")
    if K < 1:
        raise ValueError("K must be >= 1")
    n_starts = ep.T - L + 1
    rng = np.random.default_rng(seed_for("clips", ep.episode_id, seed))
    if n_starts <= K:
        starts = np.arange(1, n_starts + 1)
    else:
        starts = np.sort(rng.choice(n_starts, size=K, replace=False) + 1)
    return [clip_at(ep, int(s), L) for s in starts]


def clip_at(ep: EpisodeArrays, start: int, L: int) -> Clip:
    t = start - 1
    return Clip(ep.episode_id, start, ep.states[t], ep.actions[t:t + L], ep.obs[t], ep.instruction)


def clip_noise(clip: Clip, step: int, shape) -> np.ndarray:
    return np.random.default_rng(seed_for("energy", clip.episode_id, clip.start, step)).normal(size=shape)


def residual_energy(policy: DiffusionPolicy, clips: Sequence[Clip], steps: Sequence[int] = ENERGY_STEPS,
                    batch_size: int = 128) -> np.ndarray:
    """Mean over steps and chunk positions of the squared noise-prediction residual norm.

    The policy is only read; no gradients are recorded.
    """
    if len(steps) == 0:
        raise ValueError("energy step set must be non-empty")
    L, D = policy.cfg.chunk_length, policy.cfg.action_dim
    out = np.zeros(len(clips))
    for lo in range(0, len(clips), batch_size):
        part = clips[lo:lo + batch_size]
        states = policy.state_norm.forward(np.stack([c.state for c in part]))
        chunks = policy.action_norm.forward(np.stack([c.actions for c in part]))
        obs = np.stack([c.obs for c in part])
        instr = np.stack([c.instruction for c in part])
        if chunks.shape[1:] != (L, D):
            raise ShapeMismatch(f"clips of shape {chunks.shape[1:]} for a policy with L={L}, D={D}")
        acc = np.zeros(len(part))
        for s in steps:
            eps = np.stack([clip_noise(c, s, (L, D)) for c in part])
            noisy = forward_diffuse(chunks, np.full(len(part), s), eps, policy.schedule)
            pred = policy.predict_noise(states, obs, instr, noisy, s)
            acc += ((pred - eps) ** 2).sum(axis=2).mean(axis=1)
        out[lo:lo + len(part)] = acc / len(steps)
    return out


def zscore_logpi(energies: Sequence[float], eps: float = ZSCORE_EPS) -> np.ndarray:
    E = np.asarray(energies, dtype=np.float64)
    if E.size < 2:
        raise SingleClip("the z-score needs at least two clips")
    return -(E - E.mean()) / np.sqrt(E.var() + eps)


# -- model -----------------------------------------------------------------------
class QualityDiscriminator(Module):
    def __init__(self, cfg: DiscConfig, rng: np.random.Generator):
        H = cfg.hidden
        self.cfg = cfg
        self.state_in = Linear(cfg.state_dim, H, rng)
        self.action_in = Linear(cfg.action_dim, H, rng)
        self.logpi_in = Linear(1, H, rng)
        self.pos = param(trunc_normal(rng, (cfg.chunk_length + 2, H)))
        self.lang_in = Linear(cfg.instr_dim, H, rng)
        self.obs_in = Linear(cfg.entity_dim, H, rng)
        self.cond_pos = param(trunc_normal(rng, (1 + cfg.n_entities, H)))
        self.blocks = [Block(H, cfg.heads, rng, cfg.mlp_ratio) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(H)
        self.head = MLP(H, H, rng, out=1)

    def forward(self, states, chunks, logpi, obs, instr) -> Tensor:
        """Raw sigmoid output in (0, 1), shape (B,)."""
        cfg = self.cfg
        B = states.shape[0]
        if chunks.shape != (B, cfg.chunk_length, cfg.action_dim):
            raise ShapeMismatch(f"chunks {chunks.shape} do not match L={cfg.chunk_length}, D={cfg.action_dim}")
        clip_tokens = F.concat([
            self.state_in(Tensor(states[:, None, :])),
            self.action_in(Tensor(chunks)),
            self.logpi_in(Tensor(np.asarray(logpi, dtype=np.float64).reshape(B, 1, 1))),
        ], axis=1) + self.pos
        cond = F.concat([
            self.lang_in(Tensor(instr[:, None, :])),
            self.obs_in(Tensor(obs.reshape(B, cfg.n_entities, cfg.entity_dim))),
        ], axis=1) + self.cond_pos
        x = F.concat([clip_tokens, cond], axis=1)
        for blk in self.blocks:
            x = blk(x)
        pooled = F.mean_pool(self.ln_out(x), axis=1)
        return F.sigmoid(self.head(pooled).reshape(B))


def clamp_scores(raw):
    """Clamp to the stable score range; works on arrays and on graph tensors."""
    if isinstance(raw, Tensor):
        return F.clip(raw, SCORE_MIN, SCORE_MAX)
    return np.clip(raw, SCORE_MIN, SCORE_MAX)


def pu_loss(pos_scores, unl_scores, eta: float = PU_ETA) -> Tensor:
    """``eta * E_pos[-log d] + E_unl[-log(1 - d)]`` on already-clamped scores."""
    pos, unl = F.as_tensor(pos_scores), F.as_tensor(unl_scores)
    if pos.data.size == 0 or unl.data.size == 0:
        raise EmptyBatchSide("PU loss needs positives and unlabeled examples in every batch")
    return (-F.log(pos)).mean() * eta + (-F.log(1.0 - unl)).mean()


# -- score-to-weight mapping -------------------------------------------------------------
class WeightMapping(Protocol):
    name: str

    def raw(self, d: np.ndarray) -> np.ndarray: ...


class OddsRatio:
    """DWBC-style importance ratio ``d / (1 - d)``."""

    name = "odds_ratio"

    def raw(self, d: np.ndarray) -> np.ndarray:
        return d / (1.0 - d)


class Identity:
    name = "identity"

    def raw(self, d: np.ndarray) -> np.ndarray:
        return d.copy()


MAPPINGS = {m.name: m for m in (OddsRatio(), Identity())}


def score_to_weight(d, mapping: WeightMapping | str = "odds_ratio", normalize: bool = True) -> np.ndarray:
    """Map clip scores to loss weights; with ``normalize`` the weights average to 1."""
    if isinstance(mapping, str):
        mapping = MAPPINGS[mapping]
    d = np.atleast_1d(np.asarray(d, dtype=np.float64))
    if np.any(d < SCORE_MIN - 1e-12) or np.any(d > SCORE_MAX + 1e-12):
        raise ScoreOutOfRange(f"scores must lie in [{SCORE_MIN}, {SCORE_MAX}]")
    w = mapping.raw(d)
    if normalize:
        w = w / w.mean()
    return w


# -- training and scoring ------------------------------------------------------------------
@dataclass
class DiscTrainConfig:
    steps: int = 300
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    grad_clip: float = 1.0
    eta: float = PU_ETA
    seed: int = 0


@dataclass
class ClipTable:
    """Stacked, standardized clip features ready for batching."""

    states: np.ndarray
    chunks: np.ndarray
    logpi: np.ndarray
    obs: np.ndarray
    instr: np.ndarray
    episode_ids: list[str]
    starts: np.ndarray

    @classmethod
    def build(cls, clips: Sequence[Clip], action_norm: Standardizer, state_norm: Standardizer) -> "ClipTable":
        return cls(
            state_norm.forward(np.stack([c.state for c in clips])),
            action_norm.forward(np.stack([c.actions for c in clips])),
            np.array([c.logpi for c in clips]),
            np.stack([c.obs for c in clips]),
            np.stack([c.instruction for c in clips]),
            [c.episode_id for c in clips],
            np.array([c.start for c in clips]),
        )

    def __len__(self) -> int:
        return len(self.starts)

    def rows(self, idx) -> tuple:
        return self.states[idx], self.chunks[idx], self.logpi[idx], self.obs[idx], self.instr[idx]


class Discriminator:
    """Model + the policy normalizers it was trained with."""

    def __init__(self, cfg: DiscConfig, action_norm: Standardizer, state_norm: Standardizer, seed: int = 0):
        self.cfg = cfg
        self.action_norm = action_norm
        self.state_norm = state_norm
        self.model = QualityDiscriminator(cfg, np.random.default_rng(seed))

    def raw_scores(self, table: ClipTable, batch_size: int = 256) -> np.ndarray:
        out = np.zeros(len(table))
        with no_grad():
            for lo in range(0, len(table), batch_size):
                idx = np.arange(lo, min(lo + batch_size, len(table)))
                out[idx] = self.model(*table.rows(idx)).data
        return out

    def scores(self, table: ClipTable) -> np.ndarray:
        return clamp_scores(self.raw_scores(table))

    def score_clip(self, clip: Clip) -> float:
        return float(self.scores(ClipTable.build([clip], self.action_norm, self.state_norm))[0])

    def descriptor(self) -> dict:
        return {"kind": "discriminator", "model": asdict(self.cfg),
                "action_norm": self.action_norm.to_dict(), "state_norm": self.state_norm.to_dict()}

    def save(self, path, optimizer: AdamWState | None = None, extra: dict | None = None):
        return save_checkpoint(Checkpoint(self.descriptor(), self.model.state_dict(), optimizer, None,
                                          extra or {}), path)

    @classmethod
    def load(cls, path) -> "Discriminator":
        ck = load_checkpoint(path)
        if ck.descriptor.get("kind") != "discriminator":
            raise MissingCheckpoint(f"{path} is not a discriminator checkpoint")
        d = ck.descriptor
        disc = cls(DiscConfig(**d["model"]), Standardizer.from_dict(d["action_norm"]),
                   Standardizer.from_dict(d["state_norm"]))
        disc.model.load_state_dict(ck.params)
        return disc


def train_discriminator(disc: Discriminator, table: ClipTable, positive: np.ndarray, cfg: DiscTrainConfig,
                        log: Callable[[dict], None] | None = None, log_every: int = 100) -> list[float]:
    """Balanced PU batches: half drawn from the positive clips, half from the unlabeled pool."""
    positive = np.asarray(positive, dtype=bool)
    pos_idx = np.flatnonzero(positive)
    unl_idx = np.flatnonzero(~positive)
    if pos_idx.size == 0:
        raise NoPositives("no replay-validated positives to train on")
    if unl_idx.size == 0:
        raise EmptyBatchSide("the unlabeled pool is empty")
    rng = np.random.default_rng(cfg.seed)
    params = disc.model.named_parameters()
    opt = AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
    half = cfg.batch_size // 2
    losses = []
    for k in range(cfg.steps):
        rows = np.concatenate([rng.choice(pos_idx, size=half), rng.choice(unl_idx, size=cfg.batch_size - half)])
        disc.model.zero_grad()
        d = clamp_scores(disc.model(*table.rows(rows)))
        loss = pu_loss(d[:half], d[half:], cfg.eta)
        loss.backward()
        grads = collect_grads(params)
        clip_grad_norm(grads, cfg.grad_clip)
        lr = cfg.lr * 0.5 * (1 + math.cos(math.pi * k / cfg.steps))
        adamw_step(params, grads, opt, lr=lr)
        losses.append(loss.item())
        if log is not None and (k + 1) % log_every == 0:
            log({"step": k + 1, "loss": losses[-1]})
    return losses


def ranking_auc(pos: np.ndarray, neg: np.ndarray) -> float:
    """Mann-Whitney AUC with mid-ranks for ties."""
    pos, neg = np.asarray(pos, dtype=float), np.asarray(neg, dtype=float)
    allv = np.concatenate([pos, neg])
    order = np.argsort(allv, kind="mergesort")
    ranks = np.empty(len(allv))
    sorted_v = allv[order]
    i = 0
    while i < len(allv):
        j = i
        while j + 1 < len(allv) and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1
        i = j + 1
    r_pos = ranks[:len(pos)].sum()
    return float((r_pos - len(pos) * (len(pos) + 1) / 2) / (len(pos) * len(neg)))


# -- dataset-level passes over a manifest --------------------------------------------
def compute_logpi(policy: DiffusionPolicy, manifest, arrays: dict[str, EpisodeArrays], K: int = 8,
                  seed: int = 0, steps: Sequence[int] = ENERGY_STEPS) -> np.ndarray:
    """Sample K clips per manifest episode, store their energies and dataset-wide z-scored log-pi."""
    L = policy.cfg.chunk_length
    clips = [c for e in manifest.entries for c in sample_subclips(arrays[e.quality.episode_id], K, L, seed)]
    E = residual_energy(policy, clips, steps)
    logpi = zscore_logpi(E)
    _write_per_episode(manifest, clips, "logpi", clip_starts=[c.start for c in clips], energies=E.tolist(),
                       logpi=logpi.tolist())
    return logpi


def manifest_clips(manifest, arrays: dict[str, EpisodeArrays], L: int) -> list[Clip]:
    """The clips recorded by :func:`compute_logpi`, carrying their log-pi proxies."""
    out = []
    for e in manifest.entries:
        q = e.quality
        if not q.clip_starts or len(q.logpi) != len(q.clip_starts):
            raise ValueError(f"{q.episode_id}: log-pi proxies missing, run compute-logpi first")
        for start, lp in zip(q.clip_starts, q.logpi):
            c = clip_at(arrays[q.episode_id], start, L)
            c.logpi = lp
            out.append(c)
    return out


def score_dataset(disc: Discriminator, manifest, arrays: dict[str, EpisodeArrays],
                  mapping: WeightMapping | str = "odds_ratio") -> np.ndarray:
    """Score every recorded clip, then store clip scores, the mean episode score and clip weights.

    Weights are normalized to mean 1 over all clips of the manifest.
    """
    clips = manifest_clips(manifest, arrays, disc.cfg.chunk_length)
    d = disc.scores(ClipTable.build(clips, disc.action_norm, disc.state_norm))
    m = MAPPINGS[mapping] if isinstance(mapping, str) else mapping
    w = score_to_weight(d, m)
    stats = {"mapping": m.name, "min": float(w.min()), "max": float(w.max()), "mean": float(w.mean())}
    _write_per_episode(manifest, clips, "score", clip_scores=d.tolist(), clip_weights=w.tolist())
    for e in manifest.entries:
        manifest.update(e.quality.episode_id, "score", episode_score=float(np.mean(e.quality.clip_scores)),
                        weight_stats=stats)
    return d


def _write_per_episode(manifest, clips: Sequence[Clip], stage: str, **columns) -> None:
    rows: dict[str, list[int]] = {}
    for i, c in enumerate(clips):
        rows.setdefault(c.episode_id, []).append(i)
    for eid, idx in rows.items():
        manifest.update(eid, stage, **{k: [v[i] for i in idx] for k, v in columns.items()})
