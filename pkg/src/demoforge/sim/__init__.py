from .expert import CorruptionSpec, expert_path, generate_demo, min_jerk_profile, simulate
from .rollout import ReplayPolicy, replay, rollout_many, rollout_policy
from .tasks import TaskKind, TaskSpec, make_task, task_from_dict, task_from_id
from .world import WorldObject, WorldState, step

__all__ = [
    "CorruptionSpec", "ReplayPolicy", "TaskKind", "TaskSpec", "WorldObject", "WorldState",
    "expert_path", "generate_demo", "make_task", "min_jerk_profile", "replay", "rollout_many",
    "rollout_policy", "simulate", "step", "task_from_dict", "task_from_id",
]
