"""Multi-seed experiment harnesses built on the staged pipeline.

``separation`` measures held-out discriminator ranking of clean against
heavily jittered demos. ``ablation`` runs the full recipe per master seed and compares quality-aware
post-training with the vanilla (uniform-weight) arm. ``scaling`` post-trains
the pretrained policy of each seed on growing fractions of the clean real
demos and tracks rollout success.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .config import PipelineConfig
from .discriminator import DISC_PRESETS, ClipTable, Discriminator, ranking_auc, train_discriminator
from .pipeline import (Workspace, clip_table, curate, derived_seed, evaluate_policy, gen_corpus, load_policy,
                       run_all, run_logpi, run_pretrain, run_posttrain, write_report)
from .policy import DiffusionPolicy
from .sim.tasks import TaskKind

log = logging.getLogger("demoforge")

SEEDS = (0, 1, 2)
FRACTIONS = (0.0, 0.5, 1.0)


def seed_workspace(cfg: PipelineConfig, root: Path, seed: int) -> Workspace:
    return Workspace(Path(root) / f"seed-{seed}", replace(cfg, seed=seed))


# -- discriminator separation ---------------------------------------------------------------
@dataclass
class SeparationResult:
    auc: float  # true labels, or the mean over the label permutations
    n_clean: int
    n_corrupted: int
    elapsed_s: float  # discriminator training time of one run
    aucs: list[float] = field(default_factory=list)


def _layout_index(episode_id: str) -> int:
    return int(episode_id.split("-")[1])


def separation(ws: Workspace, corrupted: str = "heavy_jitter", permutations: int = 0) -> SeparationResult:
    """Held-out clip-ranking AUC of clean against ``corrupted`` demos.

    The discriminator trains on even layouts only (positives are the clips of replay-validated episodes)
    and is scored on the odd layouts. With ``permutations > 0`` the training label vector is shuffled
    instead, once per run, and the mean AUC over the runs is reported: a single null run ranks the
    corrupted clips as a block, above or below the clean ones, so only the average is informative.
    """
    gen_corpus(ws)
    curate(ws)
    run_pretrain(ws)
    run_logpi(ws)
    m = ws.real()
    pol = load_policy(ws, "pretrained")
    clips, table = clip_table(ws, m, (pol.action_norm, pol.state_norm))
    rows = np.flatnonzero(np.array([_layout_index(c.episode_id) for c in clips]) % 2 == 0)
    held = np.ones(len(clips), dtype=bool)
    held[rows] = False
    kind = np.array([c.episode_id.split("-", 2)[2] for c in clips])
    clean, bad = held & (kind == "clean"), held & (kind == corrupted)
    high = {r.episode_id for r in m.records if r.in_high_quality}
    labels = np.array([c.episode_id in high for c in clips])[rows]
    train = ClipTable.build([clips[i] for i in rows], pol.action_norm, pol.state_norm)
    aucs, elapsed = [], 0.0
    for k in range(max(permutations, 1)):
        seed = derived_seed(f"separation-{k}", ws.cfg.seed)
        positive = np.random.default_rng(seed).permutation(labels) if permutations else labels
        disc = Discriminator(DISC_PRESETS[ws.cfg.disc.preset], pol.action_norm, pol.state_norm, seed=seed)
        t0 = time.perf_counter()
        train_discriminator(disc, train, positive, replace(ws.cfg.disc.train, seed=seed))
        elapsed = time.perf_counter() - t0
        scores = disc.scores(table)
        aucs.append(ranking_auc(scores[clean], scores[bad]))
    return SeparationResult(float(np.mean(aucs)), int(clean.sum()), int(bad.sum()), elapsed, aucs)


# -- quality-aware vs vanilla ----------------------------------------------------------------
@dataclass
class AblationResult:
    rows: list[dict]
    # per seed: did the weighted arm beat vanilla on every task (lower A_ep, lower J_ep, success >=)
    seed_wins: dict[int, bool] = field(default_factory=dict)
    elapsed_s: float = 0.0

    @property
    def passed(self) -> bool:
        return sum(self.seed_wins.values()) >= 2


def arm_beats(better: dict, worse: dict) -> bool:
    return (better["a_ep_mean"] < worse["a_ep_mean"] and better["j_ep_mean"] < worse["j_ep_mean"]
            and better["success_rate"] >= worse["success_rate"])


def ablation(cfg: PipelineConfig, root: Path, seeds=SEEDS, force: bool = False) -> AblationResult:
    rows, wins = [], {}
    t0 = time.perf_counter()
    for s in seeds:
        ws = seed_workspace(cfg, root, s)
        res = run_all(ws, force=force)
        by = {(r["arm"], r["task"]): r for r in res}
        wins[s] = all(arm_beats(by["weighted", t], by["vanilla", t]) for t in ws.cfg.eval.tasks)
        rows += [{"seed": s, **r} for r in res if r["arm"] in ("vanilla", "weighted")]
        log.info("ablation seed %d: weighted beats vanilla on every task: %s", s, wins[s])
    write_report(rows, Path(root) / "ablation.jsonl")
    return AblationResult(rows, wins, time.perf_counter() - t0)


# -- data scaling ----------------------------------------------------------------------------
@dataclass
class ScalingResult:
    rows: list[dict]
    # per (seed, task): success non-decreasing along the fractions
    monotone: dict[tuple[int, str], bool] = field(default_factory=dict)

    def task_passes(self, task: str) -> bool:
        return sum(ok for (s, t), ok in self.monotone.items() if t == task) >= 2

    @property
    def passed(self) -> bool:
        tasks = {t for _, t in self.monotone}
        return all(self.task_passes(t) for t in tasks)


def scaling(cfg: PipelineConfig, root: Path, seeds=SEEDS, fractions=FRACTIONS, tasks=None,
            rollouts: int | None = None) -> ScalingResult:
    """Post-train on the first ``f`` of the clean demos for the same number of epochs.

    The step budget scales with the data, ``round(f * posttrain.steps)``, so every regime sees each
    demo equally often. ``f = 0`` is the pretrained policy as is.
    """
    tasks = tasks or [k.value for k in TaskKind]
    n = rollouts or cfg.eval.rollouts
    rows, mono = [], {}
    for s in seeds:
        ws = seed_workspace(cfg, root, s)
        gen_corpus(ws)
        run_pretrain(ws)
        m = ws.real()
        clean = [e for e in m.entries if e.quality.episode_id.endswith("-clean")]
        succ: dict[str, list[float]] = {t: [] for t in tasks}
        for f in fractions:
            if f == 0:
                pol = load_policy(ws, "pretrained")
            else:
                name = f"scaling_{int(round(100 * f)):03d}.npz"
                if not ws.ckpt(name).exists():
                    k = int(round(f * len(clean)))
                    run_posttrain(ws, weighted=False, entries=clean[:k], out=name,
                                  steps=max(1, int(round(f * cfg.policy.posttrain.steps))))
                pol = DiffusionPolicy.load(ws.ckpt(name))
            for r in evaluate_policy(pol, tasks, n, s, m.normalization_stats or _corpus_stats(ws, m)):
                rows.append({"seed": s, "fraction": f, **r})
                succ[r["task"]].append(r["success_rate"])
        for t in tasks:
            mono[s, t] = all(a <= b for a, b in zip(succ[t], succ[t][1:]))
            log.info("scaling seed %d %s: success %s", s, t, succ[t])
    path = Path(root) / "scaling.jsonl"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in rows))
    return ScalingResult(rows, mono)


def _corpus_stats(ws: Workspace, m):
    from .metrics import compute_normalization_stats
    return compute_normalization_stats(m.episodes())
