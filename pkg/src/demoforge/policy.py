"""Diffusion-transformer policy over action chunks.

The noise predictor sees one token for the current joint state, ``L`` tokens
for the noisy action chunk and one token for the diffusion step. Instruction
and observation tokens form the condition stream, injected by cross-attention
into alternating blocks (even blocks attend to language, odd blocks to the
scene entities). Training minimizes a per-chunk weighted DDPM objective;
control uses ancestral sampling.
"""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import (INSTR_DIM, EpisodeArrays, Standardizer, action_chunk, instruction_embedding)
from .errors import MissingCheckpoint, NegativeWeight, ShapeMismatch, StepOutOfRange
from .nn import (AdamWState, Block, Checkpoint, F, LayerNorm, Linear, MLP, Module, Tensor,
                 adamw_step, clip_grad_norm, collect_grads, load_checkpoint, no_grad,
                 save_checkpoint, sinusoidal)
from .nn.layers import param, trunc_normal
from .sim.world import ENTITY_DIM, N_ENTITIES


@dataclass
class ModelConfig:
    layers: int = 4
    hidden: int = 128
    heads: int = 4
    mlp_ratio: float = 4.0
    chunk_length: int = 32
    state_dim: int = 6
    action_dim: int = 6
    n_entities: int = N_ENTITIES
    entity_dim: int = ENTITY_DIM
    instr_dim: int = INSTR_DIM


SAMPLERS = ("ddpm", "ddim")
WEIGHT_MODES = ("loss", "sample")

POLICY_PRESETS = {
    "paper": ModelConfig(layers=28, hidden=1024, heads=16),
    "desk": ModelConfig(layers=4, hidden=128, heads=4),
    "compact": ModelConfig(layers=2, hidden=64, heads=4),
}


@dataclass
class NoiseSchedule:
    """Linear beta schedule; steps are 1-indexed, ``n = 0`` means no noise.

    ``beta_start``/``beta_end`` are quoted for a ``reference_steps``-step chain and rescaled
    by ``reference_steps / steps``, so a short chain still ends near pure noise. Without the
    rescale, 100 steps of 1e-4..0.02 leave alpha_bar_N at about 0.36 and sampling from a
    unit Gaussian starts far off the training distribution. ``reference_steps=None`` uses
    the betas verbatim.
    """

    steps: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.02
    reference_steps: int | None = 1000

    def __post_init__(self) -> None:
        scale = 1.0 if self.reference_steps is None else self.reference_steps / self.steps
        self.betas = np.linspace(self.beta_start * scale, self.beta_end * scale, self.steps)
        if not (0 < self.betas[0] and np.all(np.diff(self.betas) > 0) and self.betas[-1] < 1):
            raise ValueError("betas must increase strictly inside (0, 1)")
        self.alphas = 1.0 - self.betas
        self.alpha_bars = np.cumprod(self.alphas)

    def alpha_bar(self, n) -> np.ndarray:
        n = np.asarray(n)
        if np.any(n < 0) or np.any(n > self.steps):
            raise StepOutOfRange(f"diffusion step outside [0, {self.steps}]")
        padded = np.concatenate([[1.0], self.alpha_bars])
        return padded[n]

    def to_dict(self) -> dict:
        return {"steps": self.steps, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "reference_steps": self.reference_steps}


def forward_diffuse(chunk: np.ndarray, n, noise: np.ndarray, schedule: NoiseSchedule) -> np.ndarray:
    """``sqrt(abar_n) * a + sqrt(1 - abar_n) * eps``; ``n`` may be a per-example vector."""
    chunk = np.asarray(chunk, dtype=np.float64)
    if noise.shape != chunk.shape:
        raise ShapeMismatch(f"noise {noise.shape} vs chunk {chunk.shape}")
    n_arr = np.asarray(n)
    if np.any(n_arr < 1) or np.any(n_arr > schedule.steps):
        raise StepOutOfRange(f"step must lie in [1, {schedule.steps}]")
    ab = schedule.alpha_bar(n_arr)
    ab = ab.reshape(ab.shape + (1,) * (chunk.ndim - ab.ndim))
    return np.sqrt(ab) * chunk + np.sqrt(1.0 - ab) * noise


class DiffusionTransformer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        H = cfg.hidden
        self.cfg = cfg
        self.state_in = Linear(cfg.state_dim, H, rng)
        self.action_in = Linear(cfg.action_dim, H, rng)
        self.time_mlp = MLP(H, H, rng)
        self.pos = param(trunc_normal(rng, (cfg.chunk_length + 2, H)))
        self.lang_in = Linear(cfg.instr_dim, H, rng)
        self.obs_in = Linear(cfg.entity_dim, H, rng)
        self.cond_pos = param(trunc_normal(rng, (1 + cfg.n_entities, H)))
        self.blocks = [Block(H, cfg.heads, rng, cfg.mlp_ratio, cross=True) for _ in range(cfg.layers)]
        self.ln_out = LayerNorm(H)
        self.head = Linear(H, cfg.action_dim, rng)

    def condition(self, obs: np.ndarray, instr: np.ndarray) -> tuple[Tensor, Tensor]:
        B = obs.shape[0]
        lang = self.lang_in(Tensor(instr[:, None, :])) + self.cond_pos[0:1]
        ents = obs.reshape(B, self.cfg.n_entities, self.cfg.entity_dim)
        scene = self.obs_in(Tensor(ents)) + self.cond_pos[1:]
        return lang, scene

    def forward(self, state: np.ndarray, obs: np.ndarray, instr: np.ndarray, noisy, steps,
                cond: tuple[Tensor, Tensor] | None = None) -> Tensor:
        cfg = self.cfg
        B, L = noisy.shape[0], cfg.chunk_length
        if noisy.shape[1:] != (L, cfg.action_dim) or state.shape != (B, cfg.state_dim):
            raise ShapeMismatch(f"noisy chunk {noisy.shape} / state {state.shape} do not match the model")
        if obs.shape != (B, cfg.n_entities * cfg.entity_dim) or instr.shape != (B, cfg.instr_dim):
            raise ShapeMismatch(f"obs {obs.shape} / instruction {instr.shape} do not match the model")
        s_tok = self.state_in(Tensor(state[:, None, :]))
        a_tok = self.action_in(noisy if isinstance(noisy, Tensor) else Tensor(noisy))
        t_emb = sinusoidal(np.broadcast_to(np.asarray(steps), (B,)), cfg.hidden)[:, None, :]
        t_tok = self.time_mlp(Tensor(t_emb))
        # the step embedding is both a token of its own and a shift on every token
        x = F.concat([s_tok, a_tok, t_tok], axis=1) + self.pos + t_tok
        lang, scene = cond if cond is not None else self.condition(obs, instr)
        for i, blk in enumerate(self.blocks):
            x = blk(x, lang if i % 2 == 0 else scene)
        x = self.ln_out(x)
        return self.head(x[:, 1:1 + L])


def weighted_mean(per_example: Tensor, weights: np.ndarray) -> Tensor:
    """``sum_i w_i r_i / sum_i w_i``; an all-zero weight vector yields an exact zero loss."""
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0):
        raise NegativeWeight("loss weights must be non-negative")
    total = w.sum()
    if total == 0:
        return (per_example * w).sum()
    return (per_example * (w / total)).sum()


@dataclass
class Batch:
    states: np.ndarray  # (B, D) standardized
    obs: np.ndarray
    instr: np.ndarray
    chunks: np.ndarray  # (B, L, D) standardized
    weights: np.ndarray  # (B,)


def denoising_residuals(model: DiffusionTransformer, batch: Batch, schedule: NoiseSchedule,
                        rng: np.random.Generator) -> Tensor:
    """Per-example mean squared noise-prediction error at a random step."""
    B = batch.chunks.shape[0]
    n = rng.integers(1, schedule.steps + 1, size=B)
    eps = rng.normal(size=batch.chunks.shape)
    noisy = forward_diffuse(batch.chunks, n, eps, schedule)
    pred = model(batch.states, batch.obs, batch.instr, noisy, n)
    diff = pred - Tensor(eps)
    return (diff * diff).mean(axis=(1, 2))


def weighted_loss(model: DiffusionTransformer, batch: Batch, schedule: NoiseSchedule,
                  rng: np.random.Generator) -> Tensor:
    return weighted_mean(denoising_residuals(model, batch, schedule, rng), batch.weights)


class DiffusionPolicy:
    """Model + normalizers + schedule; implements the rollout ``act`` interface."""

    def __init__(self, cfg: ModelConfig, schedule: NoiseSchedule, action_norm: Standardizer,
                 state_norm: Standardizer, seed: int = 0, clip_sample: float = 5.0,
                 sampler: str = "ddpm", sample_steps: int | None = None):
        if sampler not in SAMPLERS:
            raise ValueError(f"sampler must be one of {SAMPLERS}, got {sampler!r}")
        self.cfg = cfg
        self.sampler = sampler
        self.sample_steps = sample_steps
        self.schedule = schedule
        self.action_norm = action_norm
        self.state_norm = state_norm
        self.clip_sample = clip_sample
        self.model = DiffusionTransformer(cfg, np.random.default_rng(seed))

    @property
    def chunk_length(self) -> int:
        return self.cfg.chunk_length

    def predict_noise(self, state, obs, instr, noisy, steps) -> np.ndarray:
        with no_grad():
            return self.model(state, obs, instr, noisy, steps).data

    def sample(self, states: np.ndarray, obs: np.ndarray, instr: np.ndarray,
               seeds: Sequence[int]) -> np.ndarray:
        """Reverse diffusion in standardized action space; one generator per row."""
        if self.sampler == "ddim":
            return self._sample_ddim(states, obs, instr, seeds)
        sch = self.schedule
        L, D = self.cfg.chunk_length, self.cfg.action_dim
        gens = [np.random.default_rng(int(s)) for s in seeds]
        x = np.stack([g.normal(size=(L, D)) for g in gens])
        with no_grad():
            cond = self.model.condition(obs, instr)
            for n in range(sch.steps, 0, -1):
                eps = self.model(states, obs, instr, x, n, cond=cond).data
                ab = sch.alpha_bar(n)
                ab_prev = sch.alpha_bar(n - 1)
                beta = sch.betas[n - 1]
                x0 = (x - math.sqrt(1 - ab) * eps) / math.sqrt(ab)
                x0 = np.clip(x0, -self.clip_sample, self.clip_sample)
                mean = (math.sqrt(ab_prev) * beta / (1 - ab)) * x0 \
                    + (math.sqrt(1 - beta) * (1 - ab_prev) / (1 - ab)) * x
                if n > 1:
                    var = beta * (1 - ab_prev) / (1 - ab)
                    z = np.stack([g.normal(size=(L, D)) for g in gens])
                    x = mean + math.sqrt(var) * z
                else:
                    x = mean
        return x

    def ddim_steps(self) -> list[int]:
        """Evenly spaced descending steps ``N .. 1`` of the deterministic sampler."""
        k = self.sample_steps or self.schedule.steps
        return sorted({int(round(v)) for v in np.linspace(1, self.schedule.steps, k)}, reverse=True)

    def _sample_ddim(self, states, obs, instr, seeds) -> np.ndarray:
        """Deterministic first-order sampler (DDIM, equivalently first-order DPM-Solver++ in x0 form)."""
        sch = self.schedule
        L, D = self.cfg.chunk_length, self.cfg.action_dim
        x = np.stack([np.random.default_rng(int(s)).normal(size=(L, D)) for s in seeds])
        steps = self.ddim_steps()
        with no_grad():
            cond = self.model.condition(obs, instr)
            for i, n in enumerate(steps):
                eps = self.model(states, obs, instr, x, n, cond=cond).data
                ab = sch.alpha_bar(n)
                x0 = np.clip((x - math.sqrt(1 - ab) * eps) / math.sqrt(ab), -self.clip_sample, self.clip_sample)
                if i + 1 == len(steps):
                    return x0
                eps = (x - math.sqrt(ab) * x0) / math.sqrt(1 - ab)
                ab_prev = sch.alpha_bar(steps[i + 1])
                x = math.sqrt(ab_prev) * x0 + math.sqrt(1 - ab_prev) * eps
        return x

    def act(self, states, obs, instructions, seeds) -> np.ndarray:
        instr = np.stack([instruction_embedding(t, self.cfg.instr_dim) for t in instructions])
        z = self.sample(self.state_norm.forward(np.asarray(states)), np.asarray(obs), instr, seeds)
        return self.action_norm.inverse(z)

    def sample_chunk(self, state, obs, instruction: str, seed: int) -> np.ndarray:
        return self.act(np.asarray(state)[None], np.asarray(obs)[None], [instruction], [seed])[0]

    # -- persistence ---------------------------------------------------------
    def descriptor(self) -> dict:
        return {
            "kind": "diffusion_policy",
            "model": asdict(self.cfg),
            "schedule": self.schedule.to_dict(),
            "action_norm": self.action_norm.to_dict(),
            "state_norm": self.state_norm.to_dict(),
            "clip_sample": self.clip_sample,
            "sampler": self.sampler,
            "sample_steps": self.sample_steps,
        }

    @classmethod
    def from_descriptor(cls, d: dict) -> "DiffusionPolicy":
        return cls(ModelConfig(**d["model"]), NoiseSchedule(**d["schedule"]),
                   Standardizer.from_dict(d["action_norm"]), Standardizer.from_dict(d["state_norm"]),
                   clip_sample=d.get("clip_sample", 5.0), sampler=d.get("sampler", "ddpm"),
                   sample_steps=d.get("sample_steps"))

    def save(self, path, optimizer: AdamWState | None = None, rng_state: dict | None = None,
             extra: dict | None = None):
        return save_checkpoint(Checkpoint(self.descriptor(), self.model.state_dict(), optimizer,
                                          rng_state, extra or {}), path)

    @classmethod
    def load(cls, path) -> "DiffusionPolicy":
        ck = load_checkpoint(path)
        if ck.descriptor.get("kind") != "diffusion_policy":
            raise MissingCheckpoint(f"{path} is not a policy checkpoint")
        pol = cls.from_descriptor(ck.descriptor)
        pol.model.load_state_dict(ck.params)
        return pol


# -- training ------------------------------------------------------------------
@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-4
    lr_warmup: int = 100
    min_lr_ratio: float = 0.1
    grad_clip: float = 1.0
    seed: int = 0
    weight_warmup: int = 500  # quality-weight ramp length in post-training
    weight_mode: str = "loss"  # "loss": weighted loss on uniform batches; "sample": batches drawn in proportion to w


def lr_at(step: int, cfg: TrainConfig) -> float:
    if step < cfg.lr_warmup:
        return cfg.lr * (step + 1) / cfg.lr_warmup
    span = max(cfg.steps - cfg.lr_warmup, 1)
    prog = min(1.0, (step - cfg.lr_warmup) / span)
    return cfg.lr * (cfg.min_lr_ratio + (1 - cfg.min_lr_ratio) * 0.5 * (1 + math.cos(math.pi * prog)))


def warmed_weight(w: np.ndarray, step: int, warmup: int) -> np.ndarray:
    """Linear ramp of the effective weight from 1 (step 0) to ``w`` (step >= warmup)."""
    frac = 1.0 if warmup <= 0 else min(1.0, step / warmup)
    return 1.0 + (np.asarray(w, dtype=np.float64) - 1.0) * frac


class ChunkDataset:
    """Every (episode, start) pair is one training chunk; chunks past the end are hold-padded."""

    def __init__(self, episodes: Sequence[EpisodeArrays], chunk_length: int,
                 weights: Sequence[np.ndarray] | None = None):
        self.episodes = list(episodes)
        self.L = chunk_length
        self.index = np.array([(i, t) for i, ep in enumerate(self.episodes) for t in range(ep.T)], dtype=np.int64)
        if weights is None:
            self.weights = np.ones(len(self.index))
        else:
            self.weights = np.concatenate([np.asarray(w, dtype=np.float64) for w in weights])
            if self.weights.shape != (len(self.index),):
                raise ShapeMismatch("one weight per training chunk expected")
            if np.any(self.weights < 0):
                raise NegativeWeight("chunk weights must be non-negative")

    def __len__(self) -> int:
        return len(self.index)

    def fit_normalizers(self) -> tuple[Standardizer, Standardizer]:
        acts = np.concatenate([ep.actions for ep in self.episodes])
        states = np.concatenate([ep.states for ep in self.episodes])
        return Standardizer.fit(acts), Standardizer.fit(states)

    def batch(self, rows: np.ndarray, policy: DiffusionPolicy, weight_scale: Callable | None = None) -> Batch:
        sel = self.index[rows]
        eps = self.episodes
        states = np.stack([eps[i].states[t] for i, t in sel])
        obs = np.stack([eps[i].obs[t] for i, t in sel])
        instr = np.stack([eps[i].instruction for i, _ in sel])
        chunks = np.stack([action_chunk(eps[i].actions, t, self.L) for i, t in sel])
        w = self.weights[rows]
        if weight_scale is not None:
            w = weight_scale(w)
        return Batch(policy.state_norm.forward(states), obs, instr, policy.action_norm.forward(chunks), w)


class PolicyTrainer:
    """Seeded training loop; its full state (params, moments, RNG, step) checkpoints exactly."""

    def __init__(self, policy: DiffusionPolicy, data: ChunkDataset, cfg: TrainConfig,
                 opt: AdamWState | None = None, rng_state: dict | None = None, step: int = 0):
        self.policy = policy
        self.data = data
        if cfg.weight_mode not in WEIGHT_MODES:
            raise ValueError(f"weight_mode must be one of {WEIGHT_MODES}, got {cfg.weight_mode!r}")
        self.cfg = cfg
        self.opt = opt or AdamWState(lr=cfg.lr, weight_decay=cfg.weight_decay)
        self.rng = np.random.default_rng(cfg.seed)
        if rng_state is not None:
            self.rng.bit_generator.state = rng_state
        self.step_count = step
        self.params = policy.model.named_parameters()
        self.losses: list[float] = []

    def step(self) -> float:
        cfg = self.cfg
        k = self.step_count
        if cfg.weight_mode == "sample":
            p = warmed_weight(self.data.weights, k, cfg.weight_warmup)
            rows = self.rng.choice(len(self.data), size=cfg.batch_size, p=p / p.sum())
            batch = self.data.batch(rows, self.policy, np.ones_like)
        else:
            rows = self.rng.integers(0, len(self.data), size=cfg.batch_size)
            batch = self.data.batch(rows, self.policy, lambda w: warmed_weight(w, k, cfg.weight_warmup))
        self.policy.model.zero_grad()
        loss = weighted_loss(self.policy.model, batch, self.policy.schedule, self.rng)
        loss.backward()
        grads = collect_grads(self.params)
        clip_grad_norm(grads, cfg.grad_clip)
        adamw_step(self.params, grads, self.opt, lr=lr_at(k, cfg))
        self.step_count += 1
        self.losses.append(loss.item())
        return self.losses[-1]

    def run(self, n: int | None = None, log: Callable[[dict], None] | None = None,
            log_every: int = 100) -> list[float]:
        n = self.cfg.steps - self.step_count if n is None else n
        t0 = time.perf_counter()
        for _ in range(n):
            loss = self.step()
            if log is not None and (self.step_count % log_every == 0 or self.step_count == self.cfg.steps):
                log({"step": self.step_count, "loss": loss, "lr": lr_at(self.step_count - 1, self.cfg),
                     "elapsed_s": round(time.perf_counter() - t0, 3)})
        return self.losses

    def save(self, path, extra: dict | None = None):
        info = {"train_config": asdict(self.cfg), "step": self.step_count}
        info.update(extra or {})
        return self.policy.save(path, self.opt, self.rng.bit_generator.state, info)

    @classmethod
    def resume(cls, path, data: ChunkDataset) -> "PolicyTrainer":
        ck = load_checkpoint(path)
        pol = DiffusionPolicy.from_descriptor(ck.descriptor)
        pol.model.load_state_dict(ck.params)
        cfg = TrainConfig(**ck.extra["train_config"])
        return cls(pol, data, cfg, ck.optimizer, ck.rng_state, ck.extra["step"])


def new_policy(data: ChunkDataset, model_cfg: ModelConfig, schedule: NoiseSchedule | None = None,
               seed: int = 0) -> DiffusionPolicy:
    action_norm, state_norm = data.fit_normalizers()
    return DiffusionPolicy(model_cfg, schedule or NoiseSchedule(), action_norm, state_norm, seed=seed)


def pretrain(episodes: Sequence[EpisodeArrays], model_cfg: ModelConfig, cfg: TrainConfig,
             log: Callable[[dict], None] | None = None) -> tuple[DiffusionPolicy, list[float]]:
    """Uniform-weight training from scratch."""
    data = ChunkDataset(episodes, model_cfg.chunk_length)
    pol = new_policy(data, model_cfg, seed=cfg.seed)
    trainer = PolicyTrainer(pol, data, cfg)
    losses = trainer.run(log=log)
    return pol, losses


def nearest_clip_weights(T: int, clip_starts: Sequence[int], clip_weights: Sequence[float]) -> np.ndarray:
    """Weight of every chunk start ``0..T-1``: the weight of the nearest scored clip.

    ``clip_starts`` are 1-indexed; ties go to the earlier clip.
    """
    starts0 = np.asarray(clip_starts, dtype=np.int64) - 1
    w = np.asarray(clip_weights, dtype=np.float64)
    order = np.argsort(starts0, kind="stable")
    starts0, w = starts0[order], w[order]
    t = np.arange(T)[:, None]
    return w[np.argmin(np.abs(t - starts0[None, :]), axis=1)]


def posttrain(policy: DiffusionPolicy, episodes: Sequence[EpisodeArrays], weights: Sequence[np.ndarray] | None,
              cfg: TrainConfig, log: Callable[[dict], None] | None = None) -> tuple[DiffusionPolicy, list[float]]:
    """Continue training a pretrained policy; ``weights=None`` is the vanilla (uniform) arm.

    Normalizers stay those of the pretrained policy so the model's input space is unchanged.
    """
    data = ChunkDataset(episodes, policy.cfg.chunk_length, weights)
    pol = DiffusionPolicy(policy.cfg, policy.schedule, policy.action_norm, policy.state_norm,
                          clip_sample=policy.clip_sample, sampler=policy.sampler,
                          sample_steps=policy.sample_steps)
    pol.model.load_state_dict(policy.model.state_dict())
    trainer = PolicyTrainer(pol, data, cfg)
    losses = trainer.run(log=log)
    return pol, losses
