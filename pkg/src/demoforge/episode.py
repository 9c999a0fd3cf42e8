"""Episode records and the ``demoforge-episode-v1`` file format."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DimMismatch, ParseError, SchemaMismatch, TooShort

EPISODE_SCHEMA = "demoforge-episode-v1"
DEFAULT_DT = 0.05  # 20 Hz logging
SIG_DIGITS = 12


class Source(str, Enum):
    SIMULATED = "simulated"
    GENERATED_EXPERT = "generated_expert"
    GENERATED_CORRUPTED = "generated_corrupted"


@dataclass
class Episode:
    """One recorded demonstration.

    ``states[t]`` is the joint state observed at step ``t`` and ``actions[t]``
    the command issued from it, so ``states[t + 1]`` is the simulator's
    response to ``actions[t]``.
    """

    episode_id: str
    task_id: str
    instruction: str
    states: np.ndarray
    actions: np.ndarray
    dt: float = DEFAULT_DT
    source: Source = Source.SIMULATED
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.float64)
        self.source = Source(self.source)
        if self.states.ndim != 2 or self.actions.ndim != 2:
            raise DimMismatch("states and actions must be T x D arrays")
        if self.states.shape != self.actions.shape:
            raise DimMismatch(
                f"states {self.states.shape} and actions {self.actions.shape} differ"
            )
        if self.states.shape[0] < 7:
            raise TooShort(f"episode {self.episode_id!r} has T={self.states.shape[0]} < 7")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")

    @property
    def T(self) -> int:
        return self.states.shape[0]

    @property
    def dims(self) -> int:
        return self.states.shape[1]


def round_sig(x, digits: int = SIG_DIGITS):
    """Round floats (or arrays of them) to ``digits`` significant digits."""
    if isinstance(x, np.ndarray):
        return np.vectorize(lambda v: float(f"{v:.{digits}g}"), otypes=[np.float64])(x) if x.size else x
    return float(f"{float(x):.{digits}g}")


def _rows(a: np.ndarray) -> list[list[float]]:
    return round_sig(a).tolist()


def episode_to_dict(ep: Episode) -> dict:
    d = {
        "schema": EPISODE_SCHEMA,
        "episode_id": ep.episode_id,
        "task_id": ep.task_id,
        "instruction": ep.instruction,
        "dt": round_sig(ep.dt),
        "dims": ep.dims,
        "source": ep.source.value,
        "states": _rows(ep.states),
        "actions": _rows(ep.actions),
    }
    if ep.meta:
        d["meta"] = ep.meta
    return d


def episode_from_dict(d: dict) -> Episode:
    if d.get("schema") != EPISODE_SCHEMA:
        raise SchemaMismatch(f"expected {EPISODE_SCHEMA}, got {d.get('schema')!r}")
    try:
        ep = Episode(
            episode_id=d["episode_id"],
            task_id=d["task_id"],
            instruction=d["instruction"],
            states=np.array(d["states"], dtype=np.float64),
            actions=np.array(d["actions"], dtype=np.float64),
            dt=float(d["dt"]),
            source=Source(d["source"]),
            meta=d.get("meta", {}),
        )
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"malformed episode record: {exc}") from exc
    if ep.dims != d["dims"]:
        raise DimMismatch(f"declared dims {d['dims']} but arrays have {ep.dims}")
    return ep


def save_episode(ep: Episode, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(episode_to_dict(ep), separators=(",", ":")))
    return path


def load_episode(path: str | Path) -> Episode:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return episode_from_dict(d)
