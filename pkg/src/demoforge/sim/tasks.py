"""Task kinds, seeded layouts and success predicates."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from ..errors import ConfigError
from .world import (GOAL_RADIUS, LEFT, RIGHT, EFFECTOR_RADIUS, WorldObject, WorldState,
                    segment_hits_circle)

HOME = np.array([[0.25, 0.2], [0.75, 0.2]])


class TaskKind(str, Enum):
    PICK_PLACE = "pick_place"
    HANDOVER = "handover"
    BIMANUAL_LIFT = "bimanual_lift"


INSTRUCTIONS = {
    TaskKind.PICK_PLACE: "pick up the block with the left hand and put it on the plate",
    TaskKind.HANDOVER: "pass the block from the left hand to the right hand and put it on the plate",
    TaskKind.BIMANUAL_LIFT: "lift the basket with both hands",
}

# Two dynamics domains: "real" is the evaluation world, "sim" is the pretraining world whose
# actuators overshoot every command by SIM_GAIN.
SIM_GAIN = 1.25
DOMAIN_GAIN = {"real": 1.0, "sim": SIM_GAIN}
SIM_PREFIX = "sim/"

# nominal expert durations in seconds, used to size max_steps
NOMINAL_SECONDS = {TaskKind.PICK_PLACE: 6.5, TaskKind.HANDOVER: 10.5, TaskKind.BIMANUAL_LIFT: 5.0}


@dataclass
class TaskSpec:
    task_id: str
    kind: TaskKind
    layout_seed: int
    objects: list[tuple[str, np.ndarray]]
    goals: list[np.ndarray]
    obstacles: list[tuple[np.ndarray, float]]
    waypoints: dict = field(default_factory=dict)
    goal_radius: float = GOAL_RADIUS
    max_steps: int = 200
    instruction: str = ""
    domain: str = "real"

    @property
    def actuation_gain(self) -> float:
        return DOMAIN_GAIN[self.domain]

    def initial_state(self) -> WorldState:
        objs = [WorldObject(oid, np.array(p, dtype=float)) for oid, p in self.objects]
        if self.kind is TaskKind.BIMANUAL_LIFT:
            gap = float(np.linalg.norm(objs[0].pos - objs[1].pos))
            for ob in objs:
                ob.pair, ob.rest_gap = "basket", gap
        return WorldState(
            effector_pos=HOME.copy(),
            grip=np.ones(2),
            objects=objs,
            obstacles=[(np.array(c, dtype=float), float(r)) for c, r in self.obstacles],
            goals=[(np.array(g, dtype=float), self.goal_radius) for g in self.goals],
            gain=self.actuation_gain,
        )

    def success(self, state: WorldState) -> bool:
        def in_goal(ob, g):
            return float(np.linalg.norm(ob.pos - g)) < self.goal_radius

        obs = state.objects
        if self.kind is TaskKind.PICK_PLACE:
            return obs[0].held_by is None and in_goal(obs[0], self.goals[0])
        if self.kind is TaskKind.HANDOVER:
            return (obs[0].held_by is None and in_goal(obs[0], self.goals[0])
                    and obs[0].touched == {LEFT, RIGHT})
        return (obs[0].held_by == LEFT and obs[1].held_by == RIGHT
                and in_goal(obs[0], self.goals[0]) and in_goal(obs[1], self.goals[1]))

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "kind": self.kind.value,
            "layout_seed": self.layout_seed,
            "objects": [[oid, list(map(float, p))] for oid, p in self.objects],
            "goals": [list(map(float, g)) for g in self.goals],
            "obstacles": [[list(map(float, c)), float(r)] for c, r in self.obstacles],
            "max_steps": self.max_steps,
            "domain": self.domain,
        }


def _u(rng, lo, hi):
    return float(rng.uniform(lo, hi))


def _expert_path(kind: TaskKind, objects, goals, wp) -> list[tuple[np.ndarray, np.ndarray]]:
    """Straight segments the scripted expert will sweep, for obstacle clearance."""
    if kind is TaskKind.PICK_PLACE:
        o, g = objects[0][1], goals[0]
        return [(HOME[LEFT], o), (o, g), (g, wp["retreat"])]
    if kind is TaskKind.HANDOVER:
        o, g, h = objects[0][1], goals[0], wp["handover"]
        return [(HOME[LEFT], o), (o, h), (h, wp["left_retreat"]), (HOME[RIGHT], h), (h, g),
                (g, wp["retreat"])]
    l0, r0 = objects[0][1], objects[1][1]
    return [(HOME[LEFT], l0), (HOME[RIGHT], r0), (l0, goals[0]), (r0, goals[1])]


def make_task(kind: TaskKind | str, layout_seed: int, domain: str = "real") -> TaskSpec:
    """Build the seeded layout of ``kind``; the obstacle is resampled until the expert clears it.

    Layouts depend only on ``(kind, layout_seed)``; ``domain`` selects the actuation gain.
    """
    kind = TaskKind(kind)
    if domain not in DOMAIN_GAIN:
        raise ConfigError(f"domain: expected one of {sorted(DOMAIN_GAIN)}, got {domain!r}")
    rng = np.random.default_rng([7919, list(TaskKind).index(kind), layout_seed])
    wp: dict = {}
    if kind is TaskKind.PICK_PLACE:
        obj = np.array([_u(rng, 0.25, 0.35), _u(rng, 0.55, 0.65)])
        goal = np.array([_u(rng, 0.60, 0.70), _u(rng, 0.60, 0.70)])
        objects, goals = [("block", obj)], [goal]
        wp["retreat"] = goal + np.array([0.0, 0.12])
        box = ((0.45, 0.60), (0.30, 0.42))
    elif kind is TaskKind.HANDOVER:
        obj = np.array([_u(rng, 0.17, 0.23), _u(rng, 0.52, 0.58)])
        goal = np.array([_u(rng, 0.77, 0.83), _u(rng, 0.52, 0.58)])
        objects, goals = [("block", obj)], [goal]
        wp["handover"] = np.array([0.5, _u(rng, 0.57, 0.63)])
        wp["left_retreat"] = wp["handover"] + np.array([-0.15, 0.0])
        wp["retreat"] = goal + np.array([0.0, 0.12])
        box = ((0.40, 0.60), (0.28, 0.38))
    else:
        cx, cy = _u(rng, 0.46, 0.54), _u(rng, 0.42, 0.48)
        objects = [("handle_l", np.array([cx - 0.1, cy])), ("handle_r", np.array([cx + 0.1, cy]))]
        lift = np.array([0.0, 0.3])
        goals = [objects[0][1] + lift, objects[1][1] + lift]
        box = ((0.45, 0.55), (0.18, 0.26))
    path = _expert_path(kind, objects, goals, wp)
    for _ in range(1000):
        c = np.array([_u(rng, *box[0]), _u(rng, *box[1])])
        r = _u(rng, 0.04, 0.06)
        clear = r + EFFECTOR_RADIUS + 0.03
        if not any(segment_hits_circle(p, q, c, clear) for p, q in path):
            break
    else:  # pragma: no cover - layouts are constructed to leave room
        raise RuntimeError(f"could not place obstacle for {kind.value} seed {layout_seed}")
    return TaskSpec(
        task_id=task_id(kind, layout_seed, domain),
        kind=kind,
        layout_seed=layout_seed,
        objects=objects,
        goals=goals,
        obstacles=[(c, r)],
        waypoints=wp,
        max_steps=int(round(1.5 * NOMINAL_SECONDS[kind] / 0.05)),
        instruction=INSTRUCTIONS[kind],
        domain=domain,
    )


def task_id(kind: TaskKind | str, layout_seed: int, domain: str = "real") -> str:
    prefix = SIM_PREFIX if domain == "sim" else ""
    return f"{prefix}{TaskKind(kind).value}-{layout_seed:04d}"


def task_from_id(tid: str) -> TaskSpec:
    domain = "sim" if tid.startswith(SIM_PREFIX) else "real"
    kind, _, seed = tid.removeprefix(SIM_PREFIX).rpartition("-")
    try:
        return make_task(TaskKind(kind), int(seed), domain)
    except ValueError as exc:
        raise ConfigError(f"cannot parse task id {tid!r}") from exc


def task_from_dict(d: dict) -> TaskSpec:
    """Task entry of a declarative config: kind + seed, optionally overriding the layout."""
    try:
        spec = make_task(TaskKind(d["kind"]), int(d.get("seed", d.get("layout_seed", 0))), d.get("domain", "real"))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"task entry {d!r}: {exc}") from exc
    if "obstacles" in d:
        spec.obstacles = [(np.array(c, dtype=float), float(r)) for c, r in d["obstacles"]]
    if "goals" in d:
        spec.goals = [np.array(g, dtype=float) for g in d["goals"]]
    if "max_steps" in d:
        spec.max_steps = int(d["max_steps"])
    return spec
