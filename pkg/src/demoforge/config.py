"""Declarative pipeline configuration.

A config is a YAML (or JSON, which YAML reads too) mapping. Every field has a
default, so an empty file is a valid config. Validation errors name the dotted
field path and, when the value came from a file, its line.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import yaml

from .discriminator import DISC_PRESETS, MAPPINGS, DiscTrainConfig
from .errors import ConfigError
from .policy import POLICY_PRESETS, TrainConfig
from .sim.expert import CorruptionSpec
from .sim.tasks import TaskKind

SEED_ENV = "DEMOFORGE_SEED"


@dataclass
class CorruptionProfile:
    name: str
    weight: float
    corruption: CorruptionSpec


DEFAULT_PROFILES = [
    CorruptionProfile("heavy_jitter", 0.3, CorruptionSpec(jitter_std=0.006)),
    CorruptionProfile("drift", 0.2, CorruptionSpec(jitter_std=0.002, drift_amp=0.02, drift_freq=0.5)),
    CorruptionProfile("pauses", 0.2, CorruptionSpec(jitter_std=0.002, pause_prob=0.03, pause_len=6)),
    CorruptionProfile("fail_goal", 0.15, CorruptionSpec(fail_goal=True)),
    CorruptionProfile("cross_obstacle", 0.15, CorruptionSpec(cross_obstacle=True)),
]


@dataclass
class CorpusConfig:
    kinds: list[str] = field(default_factory=lambda: [k.value for k in TaskKind])
    n_clean: int = 200  # real-domain expert demos
    n_corrupted: int = 200  # one corrupted twin per clean layout, up to n_clean
    n_sim: int = 300  # clean sim-domain demos for pretraining, on their own layouts
    profiles: list[CorruptionProfile] = field(default_factory=lambda: list(DEFAULT_PROFILES))


@dataclass
class CurateConfig:
    fraction: float = 0.2
    stratify: bool = True  # pre-screen within each task kind


@dataclass
class PolicyConfig:
    preset: str = "compact"
    pretrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=4000, lr=3e-3, weight_warmup=0))
    posttrain: TrainConfig = field(default_factory=lambda: TrainConfig(steps=2000, lr=1e-3, lr_warmup=50,
                                                                        weight_warmup=500))


@dataclass
class DiscConfigSection:
    preset: str = "desk"
    clips_per_episode: int = 8
    mapping: str = "odds_ratio"
    train: DiscTrainConfig = field(default_factory=DiscTrainConfig)


@dataclass
class EvalConfig:
    tasks: list[str] = field(default_factory=lambda: ["pick_place", "bimanual_lift"])
    rollouts: int = 20


@dataclass
class PipelineConfig:
    seed: int = 0
    corpus: CorpusConfig = field(default_factory=CorpusConfig)
    curate: CurateConfig = field(default_factory=CurateConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    disc: DiscConfigSection = field(default_factory=DiscConfigSection)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["corpus"]["profiles"] = [{"name": p.name, "weight": p.weight, "corruption": p.corruption.to_dict()}
                                   for p in self.corpus.profiles]
        return d

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    def validate(self) -> None:
        c = self.corpus
        for i, k in enumerate(c.kinds):
            _check(k in {t.value for t in TaskKind}, f"corpus.kinds[{i}]: unknown task kind {k!r}")
        for name in ("n_clean", "n_corrupted", "n_sim"):
            _check(getattr(c, name) >= 0, f"corpus.{name}: must be >= 0")
        _check(c.n_corrupted <= c.n_clean, "corpus.n_corrupted: corrupted demos are twins of clean ones, "
                                          "so n_corrupted <= n_clean")
        _check(not c.n_corrupted or c.profiles, "corpus.profiles: needed when n_corrupted > 0")
        for i, p in enumerate(c.profiles):
            _check(p.weight > 0, f"corpus.profiles[{i}].weight: must be > 0")
        _check(0 < self.curate.fraction < 1, "curate.fraction: must lie in (0, 1)")
        _check(self.policy.preset in POLICY_PRESETS, f"policy.preset: one of {sorted(POLICY_PRESETS)}")
        _check(self.disc.preset in DISC_PRESETS, f"disc.preset: one of {sorted(DISC_PRESETS)}")
        _check(self.disc.mapping in MAPPINGS, f"disc.mapping: one of {sorted(MAPPINGS)}")
        _check(self.disc.clips_per_episode >= 1, "disc.clips_per_episode: must be >= 1")
        for name in ("pretrain", "posttrain"):
            t = getattr(self.policy, name)
            _check(t.steps >= 1 and t.batch_size >= 1 and t.lr > 0, f"policy.{name}: steps, batch_size, lr > 0")
        _check(self.eval.rollouts >= 1, "eval.rollouts: must be >= 1")
        for i, k in enumerate(self.eval.tasks):
            _check(k in {t.value for t in TaskKind}, f"eval.tasks[{i}]: unknown task kind {k!r}")


def _check(ok: bool, msg: str) -> None:
    if not ok:
        raise ConfigError(msg)


# -- parsing -----------------------------------------------------------------------------
_NESTED = {
    PipelineConfig: {"corpus": CorpusConfig, "curate": CurateConfig, "policy": PolicyConfig,
                     "disc": DiscConfigSection, "eval": EvalConfig},
    PolicyConfig: {"pretrain": TrainConfig, "posttrain": TrainConfig},
    DiscConfigSection: {"train": DiscTrainConfig},
}


def _build(cls, d, path: str, default):
    if not isinstance(d, dict):
        raise ConfigError(f"{path or '<root>'}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kw = {}
    for key, value in d.items():
        sub = f"{path}.{key}" if path else key
        if key not in names:
            raise ConfigError(f"{sub}: unknown field")
        if key in _NESTED.get(cls, {}):
            kw[key] = _build(_NESTED[cls][key], value, sub, getattr(default, key))
        elif cls is CorpusConfig and key == "profiles":
            kw[key] = [_profile(p, f"{sub}[{i}]") for i, p in enumerate(value)]
        else:
            want = type(getattr(default, key))
            if want is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
            if not isinstance(value, want) or (want is int and isinstance(value, bool)):
                raise ConfigError(f"{sub}: expected {want.__name__}, got {type(value).__name__}")
            kw[key] = value
    return dataclasses.replace(default, **kw)


def _profile(d, path: str) -> CorruptionProfile:
    if not isinstance(d, dict) or set(d) - {"name", "weight", "corruption"} or "name" not in d:
        raise ConfigError(f"{path}: expected a mapping with name, weight and corruption")
    return CorruptionProfile(str(d["name"]), float(d.get("weight", 1.0)),
                             CorruptionSpec.from_dict(d.get("corruption", {}), f"{path}.corruption"))


def config_from_dict(d: dict | None) -> PipelineConfig:
    cfg = _build(PipelineConfig, d or {}, "", PipelineConfig())
    cfg.validate()
    return cfg


def _locate(node, dotted: str):
    """Line (1-based) of the YAML node at ``dotted`` (``a.b[2].c``), or of its deepest ancestor."""
    line = node.start_mark.line + 1
    for part in dotted.replace("[", ".[").split("."):
        if not part:
            continue
        if part.startswith("[") and isinstance(node, yaml.SequenceNode):
            i = int(part[1:-1])
            if i >= len(node.value):
                break
            node = node.value[i]
        elif isinstance(node, yaml.MappingNode):
            match = [(k, v) for k, v in node.value if k.value == part]
            if not match:
                break
            node = match[0][0] if not isinstance(match[0][1], (yaml.MappingNode, yaml.SequenceNode)) else match[0][1]
            line = match[0][0].start_mark.line + 1
            continue
        else:
            break
        line = node.start_mark.line + 1
    return line


def load_config(path: str | Path | None) -> PipelineConfig:
    """Read a config file (``None`` gives the defaults); ``DEMOFORGE_SEED`` overrides the seed."""
    text = "" if path is None else Path(path).read_text()
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f"line {mark.line + 1}: " if mark is not None else ""
        raise ConfigError(f"{path}: {where}{getattr(exc, 'problem', exc)}") from None
    try:
        cfg = config_from_dict(data)
    except ConfigError as exc:
        msg = str(exc)
        if text.strip():
            root = yaml.compose(text)
            msg = f"{path}: line {_locate(root, msg.split(':', 1)[0])}: {msg}"
        raise ConfigError(msg) from None
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            cfg.seed = int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV}: expected an integer, got {env!r}") from None
    return cfg
