"""Planar dual-effector manipulation world.

Two point effectors (left = 0, right = 1) move in the unit square. An action
is ``(dx_L, dy_L, grip_L, dx_R, dy_R, grip_R)``: position deltas are clipped
to ``MAX_DELTA`` per step and integrated, grips are absolute openness
commands in ``[0, 1]`` (closed below 0.5). Closing within ``CAPTURE_RADIUS``
of a free object grasps it; opening releases it. A held object slips out of
the gripper when the effector's per-step displacement changes by more than
``SLIP_DV`` (violent motion), and paired objects (basket handles) slip when
their spacing drifts by more than ``PAIR_TOL``. Obstacle contact is latched.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from ..errors import NonFiniteAction, ShapeMismatch

ACTION_DIM = 6
STATE_DIM = 6
MAX_DELTA = 0.05
CAPTURE_RADIUS = 0.05
SLIP_DV = 0.03
PAIR_TOL = 0.03
EFFECTOR_RADIUS = 0.02
GOAL_RADIUS = 0.06
GRIP_CLOSED = 0.5
N_ENTITIES = 5
ENTITY_DIM = 9
OBS_DIM = N_ENTITIES * ENTITY_DIM
LEFT, RIGHT = 0, 1


@dataclass
class WorldObject:
    id: str
    pos: np.ndarray
    radius: float = 0.03
    held_by: int | None = None
    pair: str | None = None
    rest_gap: float = 0.0
    touched: set = field(default_factory=set)


@dataclass
class WorldState:
    effector_pos: np.ndarray  # (2, 2)
    grip: np.ndarray  # (2,)
    objects: list[WorldObject]
    obstacles: list[tuple[np.ndarray, float]]
    goals: list[tuple[np.ndarray, float]]
    step_count: int = 0
    collided: bool = False
    last_delta: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    gain: float = 1.0  # actuation gain: displacement per unit of commanded delta

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)

    def joint_vector(self) -> np.ndarray:
        """The D=6 proprioceptive state ``(x_L, y_L, g_L, x_R, y_R, g_R)``."""
        p, g = self.effector_pos, self.grip
        return np.array([p[0, 0], p[0, 1], g[0], p[1, 0], p[1, 1], g[1]])

    def obs_features(self) -> np.ndarray:
        """Fixed-length entity features: 2 object slots, 2 goal slots, 1 obstacle slot.

        Each slot holds ``(x, y, x-x_L, y-y_L, x-x_R, y-y_R, present, held_L, held_R)``;
        empty slots are all zero.
        """
        out = np.zeros((N_ENTITIES, ENTITY_DIM))
        eff = self.effector_pos

        def fill(slot, pos, held=(0.0, 0.0)):
            rel = pos[None, :] - eff
            out[slot] = (pos[0], pos[1], rel[0, 0], rel[0, 1], rel[1, 0], rel[1, 1], 1.0, *held)

        for i, ob in enumerate(self.objects[:2]):
            fill(i, ob.pos, (float(ob.held_by == LEFT), float(ob.held_by == RIGHT)))
        for i, (c, _) in enumerate(self.goals[:2]):
            fill(2 + i, c)
        for c, _ in self.obstacles[:1]:
            fill(4, c)
        return out.reshape(-1)


def segment_hits_circle(p0: np.ndarray, p1: np.ndarray, center: np.ndarray, radius: float) -> bool:
    """True if the closed segment p0-p1 comes strictly closer than ``radius`` to ``center``."""
    d = p1 - p0
    dd = float(d @ d)
    t = 0.0 if dd == 0.0 else float(np.clip((center - p0) @ d / dd, 0.0, 1.0))
    closest = p0 + t * d
    return float(np.linalg.norm(center - closest)) < radius


def _release(ob: WorldObject) -> None:
    ob.held_by = None


def step(state: WorldState, action: np.ndarray) -> WorldState:
    action = np.asarray(action, dtype=np.float64)
    if action.shape != (ACTION_DIM,):
        raise ShapeMismatch(f"action must have shape ({ACTION_DIM},), got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise NonFiniteAction(f"non-finite action {action}")
    s = state.copy()
    a = action.reshape(2, 3)
    delta = s.gain * np.clip(a[:, :2], -MAX_DELTA, MAX_DELTA)
    new_grip = np.clip(a[:, 2], 0.0, 1.0)
    new_pos = s.effector_pos + delta

    for e in (LEFT, RIGHT):
        for c, r in s.obstacles:
            if segment_hits_circle(s.effector_pos[e], new_pos[e], c, r + EFFECTOR_RADIUS):
                s.collided = True

    # violent motion shakes held objects loose before the move takes them along
    dv = np.linalg.norm(delta - s.last_delta, axis=1)
    for ob in s.objects:
        if ob.held_by is not None and dv[ob.held_by] > SLIP_DV:
            _release(ob)

    for ob in s.objects:
        if ob.held_by is not None:
            ob.pos = new_pos[ob.held_by].copy()

    for e in (LEFT, RIGHT):
        was_closed = s.grip[e] < GRIP_CLOSED
        closed = new_grip[e] < GRIP_CLOSED
        if was_closed and not closed:
            for ob in s.objects:
                if ob.held_by == e:
                    _release(ob)
        elif closed and not was_closed:
            free = [ob for ob in s.objects if ob.held_by is None]
            if free:
                dist = [float(np.linalg.norm(ob.pos - new_pos[e])) for ob in free]
                k = int(np.argmin(dist))
                if dist[k] < CAPTURE_RADIUS:
                    free[k].held_by = e
                    free[k].pos = new_pos[e].copy()
                    free[k].touched.add(e)

    pairs: dict[str, list[WorldObject]] = {}
    for ob in s.objects:
        if ob.pair is not None:
            pairs.setdefault(ob.pair, []).append(ob)
    for members in pairs.values():
        if len(members) == 2 and any(m.held_by is not None for m in members):
            gap = float(np.linalg.norm(members[0].pos - members[1].pos))
            if abs(gap - members[0].rest_gap) > PAIR_TOL:
                for m in members:
                    _release(m)

    s.effector_pos = new_pos
    s.grip = new_grip
    s.last_delta = delta
    s.step_count += 1
    return s
