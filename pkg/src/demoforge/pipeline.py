"""The staged recipe over a working directory.

Layout under ``workdir``::

    config.json                 resolved config of the run
    corpus/real/manifest.json   evaluation-domain demos; carries every stage marker
    corpus/sim/manifest.json    pretraining demos
    checkpoints/*.npz
    reports/eval.jsonl, reports/eval.txt

Stages are ``gen-corpus -> curate -> pretrain -> compute-logpi -> train-disc ->
score -> posttrain -> eval``. Each stage checks the markers of its prerequisites
in the real manifest, and writes its own marker with the config digest and the
package version. A stage whose marker is present is skipped unless forced.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import __version__
from .config import PipelineConfig
from .curation import merge_replays, prescreen, retention
from .data import EpisodeArrays, episode_arrays
from .discriminator import (DISC_PRESETS, ClipTable, Discriminator, compute_logpi, manifest_clips,
                            score_dataset, train_discriminator)
from .episode import save_episode
from .errors import MissingCheckpoint, NumericalError, StageOrderViolation
from .manifest import DatasetManifest, load_manifest, save_manifest
from .metrics import compute_normalization_stats, coverage_eligible, episode_scores
from .policy import POLICY_PRESETS, DiffusionPolicy, TrainConfig, nearest_clip_weights, posttrain, pretrain
from .sim import CorruptionSpec, generate_demo, make_task, replay, rollout_many, task_from_id
from .sim.expert import seed_for

log = logging.getLogger("demoforge")

STAGES = ("gen-corpus", "curate", "pretrain", "compute-logpi", "train-disc", "score", "posttrain", "eval")
REQUIRES = {
    "gen-corpus": (),
    "curate": ("gen-corpus",),
    "pretrain": ("gen-corpus",),
    "compute-logpi": ("pretrain",),
    "train-disc": ("curate", "compute-logpi"),
    "score": ("train-disc",),
    "posttrain": ("score",),
    "posttrain-vanilla": ("pretrain",),
    "eval": ("pretrain",),
}
# references for the curation report: the fractions kept by the two curation steps on real robot data
REFERENCE_RETENTION = {"prescreen_fraction": 0.18, "high_quality_fraction": 0.15}
LAYOUT_STRIDE = 100_000  # layouts of master seed s live in [s * stride, (s + 1) * stride)
SIM_LAYOUTS, EVAL_LAYOUTS = 50_000, 90_000
REPORT_DIGITS = 10
ARMS = {"pretrained": "pretrain.npz", "vanilla": "post_vanilla.npz", "weighted": "post_weighted.npz"}


def derived_seed(name: str, master: int) -> int:
    return seed_for(name, master) % 2**31


def eval_layout(master: int, i: int) -> int:
    return master * LAYOUT_STRIDE + EVAL_LAYOUTS + i


@dataclass
class Workspace:
    root: Path
    cfg: PipelineConfig

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self._arrays: dict[str, EpisodeArrays] = {}

    @property
    def real_path(self) -> Path:
        return self.root / "corpus" / "real" / "manifest.json"

    @property
    def sim_path(self) -> Path:
        return self.root / "corpus" / "sim" / "manifest.json"

    def ckpt(self, name: str) -> Path:
        return self.root / "checkpoints" / name

    @property
    def reports(self) -> Path:
        return self.root / "reports"

    def real(self) -> DatasetManifest:
        if not self.real_path.exists():
            raise StageOrderViolation("no corpus in this workdir: run gen-corpus first")
        return load_manifest(self.real_path)

    def sim(self) -> DatasetManifest:
        return load_manifest(self.sim_path)

    def arrays(self, m: DatasetManifest, entries=None) -> list[EpisodeArrays]:
        out = []
        for e in entries if entries is not None else m.entries:
            eid = e.quality.episode_id
            if eid not in self._arrays:
                self._arrays[eid] = episode_arrays(m.episode(eid))
            out.append(self._arrays[eid])
        return out

    def require(self, m: DatasetManifest, stage: str) -> None:
        missing = [s for s in REQUIRES[stage] if not m.has_stage(s)]
        if missing:
            raise StageOrderViolation(f"{stage} needs {', '.join(missing)} to have run first")

    def stamp(self, m: DatasetManifest, stage: str, info: dict | None = None) -> None:
        m.config_snapshot = self.cfg.to_dict()
        m.mark_stage(stage, {"config_digest": self.cfg.digest(), "version": __version__, **(info or {})})
        save_manifest(m, self.real_path)

    def done(self, m: DatasetManifest, stage: str, force: bool) -> bool:
        if m.has_stage(stage) and not force:
            log.info("%s: already done, skipping (use --force to redo)", stage)
            return True
        return False


def _check_finite(losses, stage: str) -> None:
    if len(losses) and not np.all(np.isfinite(losses)):
        raise NumericalError(f"{stage}: non-finite training loss")


def _progress(stage: str) -> Callable[[dict], None]:
    return lambda rec: log.info("%s %s", stage, json.dumps(rec))


# -- stages --------------------------------------------------------------------------------
def profile_plan(cfg: PipelineConfig) -> list[int]:
    """Profile index of each corrupted twin: largest-remainder counts, then a seeded shuffle."""
    profiles, n = cfg.corpus.profiles, cfg.corpus.n_corrupted
    w = np.array([p.weight for p in profiles], dtype=float)
    exact = n * w / w.sum()
    counts = np.floor(exact).astype(int)
    for i in np.argsort(-(exact - counts), kind="stable")[:n - counts.sum()]:
        counts[i] += 1
    plan = np.repeat(np.arange(len(profiles)), counts)
    np.random.default_rng(derived_seed("profiles", cfg.seed)).shuffle(plan)
    return plan.tolist()


def gen_corpus(ws: Workspace, force: bool = False) -> dict:
    cfg, c = ws.cfg, ws.cfg.corpus
    if ws.real_path.exists() and ws.done(ws.real(), "gen-corpus", force):
        return ws.real().stages["gen-corpus"]
    base = cfg.seed * LAYOUT_STRIDE
    real = DatasetManifest(f"real-s{cfg.seed}")
    sim = DatasetManifest(f"sim-s{cfg.seed}")
    real_dir, sim_dir = ws.real_path.parent, ws.sim_path.parent
    plan = profile_plan(cfg) if c.n_corrupted else []
    kinds = c.kinds
    for i in range(c.n_clean):
        spec = make_task(kinds[i % len(kinds)], base + i)
        demo_seed = derived_seed(f"demo-{i}", cfg.seed)
        ep = generate_demo(spec, CorruptionSpec(), demo_seed, episode_id=f"real-{i:04d}-clean")
        real.add(ep, str(save_episode(ep, real_dir / "episodes" / f"{ep.episode_id}.json").relative_to(real_dir)))
        if i < c.n_corrupted:
            prof = c.profiles[plan[i]]
            ep = generate_demo(spec, prof.corruption, demo_seed + 1, episode_id=f"real-{i:04d}-{prof.name}")
            real.add(ep, str(save_episode(ep, real_dir / "episodes" / f"{ep.episode_id}.json")
                             .relative_to(real_dir)))
    for i in range(c.n_sim):
        spec = make_task(kinds[i % len(kinds)], base + SIM_LAYOUTS + i, "sim")
        ep = generate_demo(spec, CorruptionSpec(), derived_seed(f"sim-{i}", cfg.seed), episode_id=f"sim-{i:04d}")
        sim.add(ep, str(save_episode(ep, sim_dir / "episodes" / f"{ep.episode_id}.json").relative_to(sim_dir)))
    sim.config_snapshot = cfg.to_dict()
    save_manifest(sim, ws.sim_path)
    (ws.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=1) + "\n")
    info = {"n_real": len(real.entries), "n_sim": len(sim.entries)}
    ws.stamp(real, "gen-corpus", info)
    return info


def curate(ws: Workspace, force: bool = False) -> dict:
    """Smoothness metrics, pre-screen (per task kind when stratified), then replay of the pre-screen set."""
    m = ws.real()
    ws.require(m, "curate")
    if ws.done(m, "curate", force):
        return m.stages["curate"]
    eps = m.episodes()
    m.normalization_stats = compute_normalization_stats(eps)
    for ep in eps:
        sc = episode_scores(ep, m.normalization_stats)
        m.update(ep.episode_id, "metrics", a_ep=sc.a_ep, j_ep=sc.j_ep, coverage=sc.coverage,
                 coverage_ok=coverage_eligible(sc, ep.dims))
    frac = ws.cfg.curate.fraction
    if ws.cfg.curate.stratify:
        groups: dict[str, list] = {}
        for e in m.entries:
            groups.setdefault(task_from_id(e.task_id).kind.value, []).append(e.quality)
        selected = set().union(*(prescreen(g, frac) for _, g in sorted(groups.items())))
    else:
        selected = prescreen(m.records, frac)
    outcomes = {}
    for eid in sorted(selected):
        ep = m.episode(eid)
        res = replay(ep, task_from_id(ep.task_id))
        outcomes[eid] = (res.success, res.collision_free)
    merge_replays(m.records, outcomes)
    info = retention(m.records)
    info["n_high_quality_clean"] = sum(r.in_high_quality and r.episode_id.endswith("-clean") for r in m.records)
    ws.stamp(m, "curate", info)
    return info


def curation_report(info: dict) -> str:
    lines = [f"episodes            {info['n_episodes']}",
             f"pre-screen kept     {info['prescreen_fraction']:.1%}   (reference: about "
             f"{REFERENCE_RETENTION['prescreen_fraction']:.0%})",
             f"replay-validated    {info['high_quality_fraction']:.1%}   (reference: roughly "
             f"{REFERENCE_RETENTION['high_quality_fraction']:.0%})"]
    return "\n".join(lines)


def run_pretrain(ws: Workspace, force: bool = False) -> dict:
    m = ws.real()
    ws.require(m, "pretrain")
    if ws.done(m, "pretrain", force) and ws.ckpt(ARMS["pretrained"]).exists():
        return m.stages["pretrain"]
    sim = ws.sim()
    tc = _seeded(ws.cfg.policy.pretrain, "pretrain", ws.cfg.seed)
    pol, losses = pretrain(ws.arrays(sim), POLICY_PRESETS[ws.cfg.policy.preset], tc, log=_progress("pretrain"))
    _check_finite(losses, "pretrain")
    pol.save(ws.ckpt(ARMS["pretrained"]), extra={"train_config": tc.__dict__, "final_loss": losses[-1]})
    info = {"steps": tc.steps, "final_loss": round(losses[-1], 6), "episodes": len(sim.entries)}
    ws.stamp(m, "pretrain", info)
    return info


def _seeded(tc: TrainConfig, name: str, master: int) -> TrainConfig:
    return replace(tc, seed=derived_seed(name, master) + tc.seed)


def load_policy(ws: Workspace, arm: str) -> DiffusionPolicy:
    path = ws.ckpt(ARMS[arm])
    if not path.exists():
        raise MissingCheckpoint(f"{path}: no {arm} checkpoint")
    return DiffusionPolicy.load(path)


def run_logpi(ws: Workspace, force: bool = False) -> dict:
    m = ws.real()
    ws.require(m, "compute-logpi")
    if ws.done(m, "compute-logpi", force):
        return m.stages["compute-logpi"]
    pol = load_policy(ws, "pretrained")
    arrays = {a.episode_id: a for a in ws.arrays(m)}
    lp = compute_logpi(pol, m, arrays, ws.cfg.disc.clips_per_episode, derived_seed("clips", ws.cfg.seed))
    _check_finite(lp, "compute-logpi")
    info = {"clips": int(lp.size)}
    ws.stamp(m, "compute-logpi", info)
    return info


def clip_table(ws: Workspace, m: DatasetManifest, norms) -> tuple[list, ClipTable]:
    arrays = {a.episode_id: a for a in ws.arrays(m)}
    clips = manifest_clips(m, arrays, DISC_PRESETS[ws.cfg.disc.preset].chunk_length)
    return clips, ClipTable.build(clips, *norms)


def run_train_disc(ws: Workspace, force: bool = False) -> dict:
    m = ws.real()
    ws.require(m, "train-disc")
    if ws.done(m, "train-disc", force) and ws.ckpt("disc.npz").exists():
        return m.stages["train-disc"]
    pol = load_policy(ws, "pretrained")
    clips, table = clip_table(ws, m, (pol.action_norm, pol.state_norm))
    high = {r.episode_id for r in m.records if r.in_high_quality}
    positive = np.array([c.episode_id in high for c in clips])
    seed = derived_seed("disc", ws.cfg.seed)
    disc = Discriminator(DISC_PRESETS[ws.cfg.disc.preset], pol.action_norm, pol.state_norm, seed=seed)
    dc = replace(ws.cfg.disc.train, seed=seed + ws.cfg.disc.train.seed)
    losses = train_discriminator(disc, table, positive, dc, log=_progress("train-disc"))
    _check_finite(losses, "train-disc")
    disc.save(ws.ckpt("disc.npz"), extra={"final_loss": losses[-1]})
    info = {"positives": int(positive.sum()), "unlabeled": int((~positive).sum()),
            "final_loss": round(float(np.mean(losses[-50:])), 6)}
    ws.stamp(m, "train-disc", info)
    return info


def run_score(ws: Workspace, force: bool = False) -> dict:
    m = ws.real()
    ws.require(m, "score")
    if ws.done(m, "score", force):
        return m.stages["score"]
    disc = Discriminator.load(ws.ckpt("disc.npz"))
    arrays = {a.episode_id: a for a in ws.arrays(m)}
    d = score_dataset(disc, m, arrays, ws.cfg.disc.mapping)
    clean = [r.episode_score for r in m.records if r.episode_id.endswith("-clean")]
    bad = [r.episode_score for r in m.records if not r.episode_id.endswith("-clean")]
    info = {"clips": int(d.size), "mean_score_clean": round(float(np.mean(clean)), 6) if clean else None,
            "mean_score_corrupted": round(float(np.mean(bad)), 6) if bad else None}
    ws.stamp(m, "score", info)
    return info


def posttrain_weights(m: DatasetManifest, arrays: list[EpisodeArrays]) -> list[np.ndarray]:
    """Per-chunk weights: every chunk start takes the weight of its nearest scored clip."""
    out = []
    for a in arrays:
        q = m.entry(a.episode_id).quality
        out.append(nearest_clip_weights(a.T, q.clip_starts, q.clip_weights))
    return out


def run_posttrain(ws: Workspace, weighted: bool = True, force: bool = False, entries=None,
                  out: str | None = None, steps: int | None = None) -> dict:
    """Post-train the pretrained policy on the real corpus; ``weighted=False`` is the vanilla arm.

    ``entries``/``out``/``steps`` restrict the data and rename the checkpoint for experiments.
    """
    m = ws.real()
    stage = "posttrain" if weighted else "posttrain-vanilla"
    ws.require(m, stage)
    name = out or ARMS["weighted" if weighted else "vanilla"]
    if out is None and ws.done(m, stage, force) and ws.ckpt(name).exists():
        return m.stages[stage]
    pol = load_policy(ws, "pretrained")
    arrays = ws.arrays(m, entries)
    weights = posttrain_weights(m, arrays) if weighted else None
    tc = _seeded(ws.cfg.policy.posttrain, "posttrain", ws.cfg.seed)
    if steps is not None:
        tc = replace(tc, steps=steps)
    post, losses = posttrain(pol, arrays, weights, tc, log=_progress(stage))
    _check_finite(losses, stage)
    post.save(ws.ckpt(name), extra={"train_config": tc.__dict__, "weighted": weighted})
    info = {"steps": tc.steps, "episodes": len(arrays), "weighted": weighted,
            "final_loss": round(float(np.mean(losses[-50:])), 6)}
    if out is None:
        ws.stamp(m, stage, info)
    return info


# -- evaluation ----------------------------------------------------------------------------
def evaluate_policy(pol: DiffusionPolicy, tasks: list[str], rollouts: int, master: int,
                    stats) -> list[dict]:
    rows = []
    for kind in tasks:
        specs = [make_task(kind, eval_layout(master, i)) for i in range(rollouts)]
        seeds = [derived_seed(f"rollout-{kind}-{i}", master) for i in range(rollouts)]
        res = rollout_many(pol, specs, seeds, stats=stats)
        a = np.array([r.a_ep for r in res])
        j = np.array([r.j_ep for r in res])
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(j))):
            raise NumericalError(f"eval: non-finite rollout metrics on {kind}")
        rows.append({"task": kind, "rollouts": rollouts,
                     "success_rate": sum(r.success and r.collision_free for r in res) / rollouts,
                     "collision_rate": sum(not r.collision_free for r in res) / rollouts,
                     "a_ep_mean": float(a.mean()), "j_ep_mean": float(j.mean())})
    return rows


def _round(x):
    return round(x, REPORT_DIGITS) if isinstance(x, float) else x


def write_report(rows: list[dict], path: Path) -> tuple[Path, Path]:
    """Line-delimited JSON plus a fixed-width table next to it."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in rows:
            f.write(json.dumps({k: _round(v) for k, v in r.items()}, sort_keys=True) + "\n")
    table = path.with_suffix(".txt")
    table.write_text(format_table(rows) + "\n")
    return path, table


def format_table(rows: list[dict]) -> str:
    head = f"{'arm':<12}{'task':<16}{'n':>4}{'success':>10}{'A_ep':>10}{'J_ep':>10}"
    lines = [head, "-" * len(head)]
    for r in rows:
        lines.append(f"{r['arm']:<12}{r['task']:<16}{r['rollouts']:>4}{r['success_rate']:>10.2f}"
                     f"{r['a_ep_mean']:>10.4f}{r['j_ep_mean']:>10.4f}")
    return "\n".join(lines)


def run_eval(ws: Workspace, rollouts: int | None = None, arms: list[str] | None = None,
             tasks: list[str] | None = None, plots: bool = False, force: bool = False) -> list[dict]:
    m = ws.real()
    ws.require(m, "eval")
    report = ws.reports / "eval.jsonl"
    if ws.done(m, "eval", force) and report.exists() and rollouts is None and arms is None and tasks is None:
        return [json.loads(line) for line in report.read_text().splitlines()]
    n = rollouts or ws.cfg.eval.rollouts
    tasks = tasks or ws.cfg.eval.tasks
    arms = arms or [a for a in ARMS if ws.ckpt(ARMS[a]).exists()]
    rows = []
    for arm in arms:
        pol = load_policy(ws, arm)
        for r in evaluate_policy(pol, tasks, n, ws.cfg.seed, m.normalization_stats or _stats(ws, m)):
            rows.append({"arm": arm, **r})
    write_report(rows, report)
    if plots:
        plot_report(rows, ws.reports)
    ws.stamp(m, "eval", {"rollouts": n, "arms": arms, "tasks": tasks})
    return rows


def _stats(ws: Workspace, m: DatasetManifest):
    return compute_normalization_stats(m.episodes())


def plot_report(rows: list[dict], out_dir: Path) -> list[Path]:
    """Static bar charts of success, A_ep and J_ep per arm and task."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    arms = list(dict.fromkeys(r["arm"] for r in rows))
    tasks = list(dict.fromkeys(r["task"] for r in rows))
    paths = []
    for key, label in (("success_rate", "success rate"), ("a_ep_mean", "mean A_ep"), ("j_ep_mean", "mean J_ep")):
        fig, ax = plt.subplots(figsize=(5, 3))
        width = 0.8 / max(len(arms), 1)
        for k, arm in enumerate(arms):
            vals = [next(r[key] for r in rows if r["arm"] == arm and r["task"] == t) for t in tasks]
            ax.bar(np.arange(len(tasks)) + k * width, vals, width, label=arm)
        ax.set_xticks(np.arange(len(tasks)) + width * (len(arms) - 1) / 2, tasks)
        ax.set_ylabel(label)
        ax.legend(fontsize=7)
        fig.tight_layout()
        p = out_dir / f"{key}.png"
        fig.savefig(p, dpi=100)
        plt.close(fig)
        paths.append(p)
    return paths


def run_all(ws: Workspace, force: bool = False, vanilla: bool = True) -> list[dict]:
    """Every stage in order, then both post-training arms and the evaluation."""
    gen_corpus(ws, force)
    curate(ws, force)
    run_pretrain(ws, force)
    run_logpi(ws, force)
    run_train_disc(ws, force)
    run_score(ws, force)
    run_posttrain(ws, weighted=True, force=force)
    if vanilla:
        run_posttrain(ws, weighted=False, force=force)
    return run_eval(ws, force=force)

