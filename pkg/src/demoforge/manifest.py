"""Persistent dataset manifest (``demoforge-manifest-v1``).

The manifest is the single source of truth between pipeline stages. Episodes
live in their own files next to it; the manifest stores relative paths, the
quality record of each episode, the dataset-wide normalization stats, the
configuration snapshot and the completed-stage markers.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from .curation import FIELD_OWNER, QualityRecord
from .episode import Episode, load_episode, round_sig
from .errors import MissingEpisodeFile, ParseError, SchemaMismatch
from .metrics import NormalizationStats

MANIFEST_SCHEMA = "demoforge-manifest-v1"


@dataclass
class ManifestEntry:
    path: str
    quality: QualityRecord
    source: str = "simulated"
    task_id: str = ""


@dataclass
class DatasetManifest:
    dataset_id: str
    entries: list[ManifestEntry] = field(default_factory=list)
    normalization_stats: NormalizationStats | None = None
    config_snapshot: dict = field(default_factory=dict)
    stages: dict = field(default_factory=dict)
    schema_version: str = MANIFEST_SCHEMA
    root: Path | None = None
    _cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self) -> None:
        ids = [e.quality.episode_id for e in self.entries]
        if len(ids) != len(set(ids)):
            raise ValueError("episode ids in a manifest must be unique")

    @property
    def records(self) -> list[QualityRecord]:
        return [e.quality for e in self.entries]

    def entry(self, episode_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.quality.episode_id == episode_id:
                return e
        raise KeyError(episode_id)

    def select(self, sources: tuple[str, ...] | None = None) -> list[ManifestEntry]:
        if sources is None:
            return list(self.entries)
        return [e for e in self.entries if e.source in sources]

    def add(self, ep: Episode, path: str) -> None:
        if any(e.quality.episode_id == ep.episode_id for e in self.entries):
            raise ValueError(f"duplicate episode id {ep.episode_id!r}")
        self.entries.append(ManifestEntry(path, QualityRecord(ep.episode_id), ep.source.value, ep.task_id))
        self._cache[ep.episode_id] = ep

    def episode(self, episode_id: str) -> Episode:
        if episode_id not in self._cache:
            e = self.entry(episode_id)
            path = Path(e.path) if self.root is None else self.root / e.path
            if not path.exists():
                raise MissingEpisodeFile(str(path))
            ep = load_episode(path)
            if ep.episode_id != episode_id:
                raise ParseError(f"{path} holds {ep.episode_id!r}, expected {episode_id!r}")
            self._cache[episode_id] = ep
        return self._cache[episode_id]

    def episodes(self, entries: list[ManifestEntry] | None = None) -> list[Episode]:
        entries = self.entries if entries is None else entries
        return [self.episode(e.quality.episode_id) for e in entries]

    def update(self, episode_id: str, stage: str, **fields) -> None:
        """Write quality fields on behalf of ``stage``; other stages' fields are off limits."""
        rec = self.entry(episode_id).quality
        for name, value in fields.items():
            owner = FIELD_OWNER.get(name)
            if owner is None:
                raise AttributeError(f"unknown quality field {name!r}")
            if owner != stage:
                raise PermissionError(f"field {name!r} belongs to stage {owner!r}, not {stage!r}")
            setattr(rec, name, value)

    def mark_stage(self, stage: str, info: dict) -> None:
        self.stages[stage] = info

    def has_stage(self, stage: str) -> bool:
        return stage in self.stages


def _quality_to_dict(q: QualityRecord) -> dict:
    out = {}
    for f in dataclasses.fields(q):
        v = getattr(q, f.name)
        if isinstance(v, float):
            v = round_sig(v)
        elif isinstance(v, list):
            v = [round_sig(x) if isinstance(x, float) else x for x in v]
        out[f.name] = v
    return out


def _quality_from_dict(d: dict) -> QualityRecord:
    names = {f.name for f in dataclasses.fields(QualityRecord)}
    unknown = set(d) - names
    if unknown:
        raise ParseError(f"unknown quality fields {sorted(unknown)}")
    return QualityRecord(**d)


def manifest_to_dict(m: DatasetManifest) -> dict:
    return {
        "schema": m.schema_version,
        "dataset_id": m.dataset_id,
        "normalization_stats": None if m.normalization_stats is None else {
            "scope": m.normalization_stats.scope,
            "per_dim_min": [round_sig(x) for x in m.normalization_stats.per_dim_min.tolist()],
            "per_dim_max": [round_sig(x) for x in m.normalization_stats.per_dim_max.tolist()],
        },
        "config_snapshot": m.config_snapshot,
        "stages": m.stages,
        "episodes": [
            {"path": e.path, "source": e.source, "task_id": e.task_id, "quality": _quality_to_dict(e.quality)}
            for e in m.entries
        ],
    }


def save_manifest(m: DatasetManifest, path: str | Path) -> Path:
    """Write atomically: a reader never sees a half-written manifest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest_to_dict(m), indent=1, sort_keys=False) + "\n")
    os.replace(tmp, path)
    m.root = path.parent
    return path


def load_manifest(path: str | Path, check_files: bool = True) -> DatasetManifest:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc
    except FileNotFoundError as exc:
        raise ParseError(f"{path}: no such manifest") from exc
    if d.get("schema") != MANIFEST_SCHEMA:
        raise SchemaMismatch(f"{path}: expected {MANIFEST_SCHEMA}, got {d.get('schema')!r}")
    try:
        ns = d.get("normalization_stats")
        m = DatasetManifest(
            dataset_id=d["dataset_id"],
            entries=[
                ManifestEntry(e["path"], _quality_from_dict(e["quality"]), e.get("source", "simulated"),
                              e.get("task_id", ""))
                for e in d["episodes"]
            ],
            normalization_stats=None if ns is None else NormalizationStats.from_dict(ns),
            config_snapshot=d.get("config_snapshot", {}),
            stages=d.get("stages", {}),
            root=path.parent,
        )
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: malformed manifest: {exc}") from exc
    if check_files:
        for e in m.entries:
            if not (m.root / e.path).exists():
                raise MissingEpisodeFile(str(m.root / e.path))
    return m
