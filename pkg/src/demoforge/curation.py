"""Quality records, smoothness pre-screening and replay bookkeeping."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .errors import EmptyDataset, ReplayOnNonPrescreened

SCORE_MIN, SCORE_MAX = 0.1, 0.9

# which pipeline stage may write which record field
FIELD_OWNER = {
    "a_ep": "metrics",
    "j_ep": "metrics",
    "coverage": "metrics",
    "coverage_ok": "metrics",
    "in_prescreen": "curate",
    "replay_success": "replay",
    "collision_free": "replay",
    "in_high_quality": "replay",
    "clip_starts": "logpi",
    "energies": "logpi",
    "logpi": "logpi",
    "clip_scores": "score",
    "episode_score": "score",
    "clip_weights": "score",
    "weight_stats": "score",
}


@dataclass
class QualityRecord:
    episode_id: str
    a_ep: float | None = None
    j_ep: float | None = None
    coverage: float | None = None
    coverage_ok: bool | None = None
    in_prescreen: bool = False
    replay_success: bool | None = None
    collision_free: bool | None = None
    in_high_quality: bool = False
    clip_starts: list[int] = field(default_factory=list)
    energies: list[float] = field(default_factory=list)
    logpi: list[float] = field(default_factory=list)
    clip_scores: list[float] = field(default_factory=list)
    episode_score: float | None = None
    clip_weights: list[float] = field(default_factory=list)
    weight_stats: dict | None = None

    @property
    def scored_clips(self) -> list[tuple[int, float]]:
        return list(zip(self.clip_starts, self.clip_scores))

    def check(self) -> None:
        if self.in_high_quality and not (self.in_prescreen and self.replay_success and self.collision_free):
            raise ValueError(f"{self.episode_id}: high-quality flag without passing replay")
        for d in self.clip_scores:
            if not SCORE_MIN <= d <= SCORE_MAX:
                raise ValueError(f"{self.episode_id}: clip score {d} outside [0.1, 0.9]")


def low_fraction(records: Sequence[QualityRecord], key: str, fraction: float) -> set[str]:
    """Ids of the lowest ``floor(fraction * N)`` records by ``key``; ties go to the smaller id."""
    keep = math.floor(fraction * len(records))
    ranked = sorted(records, key=lambda r: (getattr(r, key), r.episode_id))
    return {r.episode_id for r in ranked[:keep]}


def prescreen(records: Sequence[QualityRecord], fraction: float = 0.2) -> set[str]:
    """Intersect the low-acceleration and low-jerk sets and apply the coverage guard.

    Marks ``in_prescreen`` on every record and returns the selected ids.
    """
    if not records:
        raise EmptyDataset("no records to pre-screen")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    for r in records:
        if r.a_ep is None or r.j_ep is None or r.coverage_ok is None:
            raise ValueError(f"{r.episode_id}: metrics missing, run the metrics stage first")
    selected = low_fraction(records, "a_ep", fraction) & low_fraction(records, "j_ep", fraction)
    selected = {r.episode_id for r in records if r.episode_id in selected and r.coverage_ok}
    for r in records:
        r.in_prescreen = r.episode_id in selected
    return selected


def record_replay(record: QualityRecord, success: bool, collision_free: bool) -> QualityRecord:
    if not record.in_prescreen:
        raise ReplayOnNonPrescreened(f"{record.episode_id} is not in the pre-screen set")
    record.replay_success = bool(success)
    record.collision_free = bool(collision_free)
    record.in_high_quality = record.replay_success and record.collision_free
    return record


def merge_replays(records: Iterable[QualityRecord], outcomes: dict[str, tuple[bool, bool]]) -> None:
    """Apply replay outcomes keyed by episode id, in sorted id order."""
    by_id = {r.episode_id: r for r in records}
    for eid in sorted(outcomes):
        record_replay(by_id[eid], *outcomes[eid])


def retention(records: Sequence[QualityRecord]) -> dict[str, float]:
    n = len(records)
    return {
        "n_episodes": n,
        "prescreen_fraction": sum(r.in_prescreen for r in records) / n if n else 0.0,
        "high_quality_fraction": sum(r.in_high_quality for r in records) / n if n else 0.0,
    }
