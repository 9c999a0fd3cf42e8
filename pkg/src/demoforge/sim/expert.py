"""Scripted minimum-jerk experts and teleoperation-style corruptions."""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field

import numpy as np

from ..episode import DEFAULT_DT, Episode, Source
from ..errors import ConfigError
from .tasks import HOME, TaskKind, TaskSpec
from .world import LEFT, RIGHT, WorldState, step

POS_CHANNELS = np.array([0, 1, 3, 4])
GRIP_CHANNELS = np.array([2, 5])


def min_jerk_profile(n: int) -> np.ndarray:
    """Quintic time-scaling ``10 s^3 - 15 s^4 + 6 s^5`` sampled at ``n + 1`` points in [0, 1]."""
    s = np.linspace(0.0, 1.0, n + 1)
    return s ** 3 * (10.0 - 15.0 * s + 6.0 * s ** 2)


@dataclass
class Segment:
    seconds: float
    target: np.ndarray  # (6,) commanded joint vector at the end of the segment
    role: str = "move"


@dataclass
class CorruptionSpec:
    jitter_std: float | list[float] = 0.0
    drift_amp: float = 0.0
    drift_freq: float = 0.0
    pause_prob: float = 0.0
    pause_len: int = 0
    delay_steps: int = 0
    fail_goal: bool = False
    cross_obstacle: bool = False

    def __post_init__(self) -> None:
        js = np.atleast_1d(np.asarray(self.jitter_std, dtype=float))
        if js.size not in (1, 6):
            raise ConfigError("jitter_std: expected a scalar or 6 per-dimension values")
        for name in ("drift_amp", "drift_freq", "pause_prob", "pause_len", "delay_steps"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name}: must be >= 0, got {getattr(self, name)}")
        if np.any(js < 0):
            raise ConfigError("jitter_std: must be >= 0")
        if self.pause_prob > 1:
            raise ConfigError("pause_prob: must be <= 1")

    @property
    def is_clean(self) -> bool:
        return (np.all(np.asarray(self.jitter_std) == 0) and self.drift_amp == 0 and self.pause_prob == 0
                and self.delay_steps == 0 and not self.fail_goal and not self.cross_obstacle)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict, path: str = "corruption") -> "CorruptionSpec":
        known = set(cls.__dataclass_fields__)
        for k in d:
            if k not in known:
                raise ConfigError(f"{path}.{k}: unknown corruption field")
        try:
            return cls(**d)
        except ConfigError as exc:
            raise ConfigError(f"{path}.{exc}") from None
        except TypeError as exc:
            raise ConfigError(f"{path}: {exc}") from None


def _vec(left_xy, left_g, right_xy, right_g) -> np.ndarray:
    return np.array([left_xy[0], left_xy[1], left_g, right_xy[0], right_xy[1], right_g], dtype=float)


def expert_segments(spec: TaskSpec) -> list[Segment]:
    L0, R0 = HOME[LEFT], HOME[RIGHT]
    wp = spec.waypoints
    segs: list[Segment] = [Segment(0.25, _vec(L0, 1, R0, 1), "hold")]
    if spec.kind is TaskKind.PICK_PLACE:
        o, g = spec.objects[0][1], spec.goals[0]
        segs += [
            Segment(1.5, _vec(o, 1, R0, 1), "reach"),
            Segment(0.5, _vec(o, 0, R0, 1), "grip"),
            Segment(2.0, _vec(g, 0, R0, 1), "carry"),
            Segment(0.5, _vec(g, 1, R0, 1), "grip"),
            Segment(1.0, _vec(wp["retreat"], 1, R0, 1), "retreat"),
            Segment(0.5, _vec(wp["retreat"], 1, R0, 1), "hold"),
        ]
    elif spec.kind is TaskKind.HANDOVER:
        o, g, h, lr = spec.objects[0][1], spec.goals[0], wp["handover"], wp["left_retreat"]
        segs += [
            Segment(1.5, _vec(o, 1, R0, 1), "reach"),
            Segment(0.5, _vec(o, 0, R0, 1), "grip"),
            Segment(1.5, _vec(h, 0, R0, 1), "carry"),
            Segment(0.5, _vec(h, 1, R0, 1), "grip"),
            Segment(1.5, _vec(lr, 1, h, 1), "exchange"),
            Segment(0.5, _vec(lr, 1, h, 0), "grip"),
            Segment(1.5, _vec(lr, 1, g, 0), "carry_right"),
            Segment(0.5, _vec(lr, 1, g, 1), "grip"),
            Segment(1.0, _vec(lr, 1, wp["retreat"], 1), "retreat"),
            Segment(0.5, _vec(lr, 1, wp["retreat"], 1), "hold"),
        ]
    else:
        lh, rh = spec.objects[0][1], spec.objects[1][1]
        gl, gr = spec.goals
        segs += [
            Segment(1.5, _vec(lh, 1, rh, 1), "reach"),
            Segment(0.5, _vec(lh, 0, rh, 0), "grip"),
            Segment(2.0, _vec(gl, 0, gr, 0), "carry"),
            Segment(0.75, _vec(gl, 0, gr, 0), "hold"),
        ]
    return segs


def expert_path(spec: TaskSpec, dt: float = DEFAULT_DT) -> tuple[np.ndarray, list[tuple[int, int, str]]]:
    """Commanded joint trajectory and the (start, end, role) row span of each segment."""
    start = _vec(HOME[LEFT], 1.0, HOME[RIGHT], 1.0)
    rows = [start]
    spans = []
    cur = start
    for seg in expert_segments(spec):
        n = max(1, int(round(seg.seconds / dt)))
        prof = min_jerk_profile(n)[1:, None]
        rows.extend(cur + prof * (seg.target - cur))
        spans.append((len(rows) - 1 - n, len(rows) - 1, seg.role))
        cur = seg.target
    return np.array(rows), spans


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x ** 3 * (10.0 - 15.0 * x + 6.0 * x ** 2)


def apply_corruption(path: np.ndarray, spans, spec: TaskSpec, c: CorruptionSpec,
                     rng: np.random.Generator, dt: float = DEFAULT_DT) -> np.ndarray:
    """Corrupt a commanded path in the fixed order delay, drift, jitter, pauses, wrong goal.

    ``src`` tracks, for every output row, which row of the clean path the
    position channels came from, so later operators can target task phases.
    """
    P = path.copy()
    src = np.arange(len(P), dtype=float)

    if c.delay_steps:
        d = int(c.delay_steps)
        T = len(P)
        out = np.empty((T + d, P.shape[1]))
        idx = np.clip(np.arange(T + d) - d, 0, T - 1)
        out[:, POS_CHANNELS] = P[idx][:, POS_CHANNELS]
        # the hand stream is not delayed: grip commands lead the arm by d steps
        out[:, GRIP_CHANNELS] = P[np.clip(np.arange(T + d), 0, T - 1)][:, GRIP_CHANNELS]
        P, src = out, idx.astype(float)

    if c.drift_amp > 0:
        phase = rng.uniform(0, 2 * np.pi, size=len(POS_CHANNELS))
        t = np.arange(len(P))[:, None] * dt
        P[:, POS_CHANNELS] += c.drift_amp * (np.sin(2 * np.pi * c.drift_freq * t + phase) - np.sin(phase))

    js = np.atleast_1d(np.asarray(c.jitter_std, dtype=float))
    if np.any(js > 0):
        if js.size == 1:
            noise = rng.normal(0.0, js[0], size=(len(P), len(POS_CHANNELS)))
            noise[0] = 0.0
            P[:, POS_CHANNELS] += noise
        else:
            noise = rng.normal(0.0, 1.0, size=P.shape) * js
            noise[0] = 0.0
            P += noise
            P[:, GRIP_CHANNELS] = np.clip(P[:, GRIP_CHANNELS], 0.0, 1.0)

    if c.pause_prob > 0 and c.pause_len > 0:
        boundaries = {e for _, e, _ in spans[:-1]}
        rows, srcs = [], []
        for i in range(len(P)):
            rows.append(P[i])
            srcs.append(src[i])
            if src[i] in boundaries and (i + 1 == len(P) or src[i + 1] != src[i]):
                if rng.uniform() < c.pause_prob:
                    rows.extend([P[i]] * int(c.pause_len))
                    srcs.extend([src[i]] * int(c.pause_len))
        P, src = np.array(rows), np.array(srcs)

    if c.fail_goal:
        carry = [(s, e) for s, e, role in spans if role.startswith("carry")]
        s0, e0 = carry[-1] if spec.kind is not TaskKind.BIMANUAL_LIFT else carry[0]
        ramp = _smoothstep((src - s0) / (e0 - s0))[:, None]
        angle = rng.uniform(0, 2 * np.pi)
        offset = 0.25 * np.array([np.cos(angle), np.sin(angle)])
        if spec.kind is TaskKind.PICK_PLACE:
            chans = [[0, 1]]
        elif spec.kind is TaskKind.HANDOVER:
            chans = [[3, 4]]
        else:
            chans = [[0, 1], [3, 4]]
        for ch in chans:
            P[:, ch] += ramp * offset

    if c.cross_obstacle:
        s0, e0 = next((s, e) for s, e, role in spans if role == "reach")
        center = spec.obstacles[0][0]
        eff = RIGHT if spec.kind is TaskKind.BIMANUAL_LIFT else LEFT
        ch = [3 * eff, 3 * eff + 1]
        mid = path[(s0 + e0) // 2, ch]
        x = np.clip((src - s0) / (e0 - s0), 0.0, 1.0)
        bump = np.sin(np.pi * x) ** 2
        P[:, ch] += bump[:, None] * (center - mid)
    return P


def path_to_actions(P: np.ndarray) -> np.ndarray:
    """Position deltas toward the next commanded row, absolute grips; the last action holds."""
    A = np.empty_like(P)
    A[:-1, POS_CHANNELS] = P[1:, POS_CHANNELS] - P[:-1, POS_CHANNELS]
    A[:-1, GRIP_CHANNELS] = P[1:, GRIP_CHANNELS]
    A[-1, POS_CHANNELS] = 0.0
    A[-1, GRIP_CHANNELS] = P[-1, GRIP_CHANNELS]
    return A


def simulate(spec: TaskSpec, actions: np.ndarray) -> tuple[np.ndarray, list[WorldState]]:
    """States observed before each action, plus the full world trace (len T + 1)."""
    world = spec.initial_state()
    trace = [world]
    for a in actions:
        world = step(world, a)
        trace.append(world)
    states = np.array([w.joint_vector() for w in trace[:-1]])
    return states, trace


def seed_for(*parts) -> int:
    h = hashlib.sha256("|".join(map(str, parts)).encode()).digest()
    return int.from_bytes(h[:8], "little")


def generate_demo(spec: TaskSpec, corruption: CorruptionSpec, seed: int, episode_id: str | None = None,
                  source: Source | None = None, dt: float = DEFAULT_DT) -> Episode:
    path, spans = expert_path(spec, dt)
    rng = np.random.default_rng(seed_for("demo", spec.task_id, seed))
    if not corruption.is_clean:
        path = apply_corruption(path, spans, spec, corruption, rng, dt)
    actions = path_to_actions(path)
    actions[:, POS_CHANNELS] /= spec.actuation_gain
    states, _ = simulate(spec, actions)
    if source is None:
        if spec.domain == "sim":
            source = Source.SIMULATED
        else:
            source = Source.GENERATED_EXPERT if corruption.is_clean else Source.GENERATED_CORRUPTED
    return Episode(
        episode_id=episode_id or f"{spec.task_id}-s{seed}",
        task_id=spec.task_id,
        instruction=spec.instruction,
        states=states,
        actions=actions,
        dt=dt,
        source=source,
        meta={"seed": int(seed), "corruption": corruption.to_dict()},
    )
