import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demoforge.errors import ConfigError, NonFiniteAction, ShapeMismatch, TaskMismatch
from demoforge.metrics import episode_scores
from demoforge.sim.rollout import UNIT_STATS
from demoforge.sim import (CorruptionSpec, ReplayPolicy, TaskKind, generate_demo, make_task, replay,
                           rollout_policy, simulate, step)
from demoforge.episode import Source
from demoforge.sim.expert import min_jerk_profile
from demoforge.sim.tasks import SIM_GAIN, task_from_id
from demoforge.sim.world import CAPTURE_RADIUS, MAX_DELTA, OBS_DIM, WorldObject, WorldState

KINDS = [k.value for k in TaskKind]


def bare_world(obj_at=(0.3, 0.3)):
    return WorldState(
        effector_pos=np.array([[0.3, 0.3], [0.7, 0.3]]),
        grip=np.array([1.0, 1.0]),
        objects=[WorldObject("block", np.array(obj_at, dtype=float))],
        obstacles=[(np.array([0.3, 0.5]), 0.05)],
        goals=[(np.array([0.6, 0.6]), 0.06)],
    )


def test_zero_action_keeps_world():
    w = bare_world()
    w2 = step(w, np.array([0, 0, 1, 0, 0, 1.0]))
    np.testing.assert_array_equal(w2.effector_pos, w.effector_pos)
    np.testing.assert_array_equal(w2.objects[0].pos, w.objects[0].pos)
    assert w2.step_count == 1 and not w2.collided


def test_step_does_not_mutate_input():
    w = bare_world()
    before = w.joint_vector()
    step(w, np.array([0.01, 0.01, 0, 0, 0, 1.0]))
    np.testing.assert_array_equal(w.joint_vector(), before)


def test_delta_is_clipped():
    w2 = step(bare_world(), np.array([1.0, -1.0, 1, 0, 0, 1.0]))
    np.testing.assert_allclose(w2.effector_pos[0], [0.3 + MAX_DELTA, 0.3 - MAX_DELTA])


def test_grasp_on_closing_edge_and_carry():
    w = step(bare_world(), np.array([0, 0, 0.0, 0, 0, 1.0]))
    assert w.objects[0].held_by == 0
    w = step(w, np.array([0.01, 0, 0.0, 0, 0, 1.0]))
    np.testing.assert_allclose(w.objects[0].pos, [0.31, 0.3])
    w = step(w, np.array([0, 0, 1.0, 0, 0, 1.0]))
    assert w.objects[0].held_by is None


def test_no_grasp_outside_capture_radius():
    w = step(bare_world(obj_at=(0.3 + CAPTURE_RADIUS + 0.01, 0.3)), np.array([0, 0, 0.0, 0, 0, 1.0]))
    assert w.objects[0].held_by is None


def test_violent_motion_slips():
    w = step(bare_world(), np.array([0, 0, 0.0, 0, 0, 1.0]))
    w = step(w, np.array([0.04, 0, 0.0, 0, 0, 1.0]))
    assert w.objects[0].held_by is None
    np.testing.assert_allclose(w.objects[0].pos, [0.3, 0.3])


def test_collision_latches():
    w = bare_world()
    for _ in range(6):
        w = step(w, np.array([0, 0.04, 1, 0, 0, 1.0]))
    assert w.collided
    for _ in range(20):
        w = step(w, np.array([0.04, 0, 1, 0, 0, 1.0]))
    assert w.collided


def test_step_rejects_bad_actions():
    with pytest.raises(ShapeMismatch):
        step(bare_world(), np.zeros(5))
    with pytest.raises(NonFiniteAction):
        step(bare_world(), np.array([np.nan, 0, 1, 0, 0, 1]))


def test_obs_features_layout():
    w = make_task("pick_place", 3).initial_state()
    f = w.obs_features().reshape(5, -1)
    assert w.obs_features().shape == (OBS_DIM,)
    np.testing.assert_allclose(f[0, :2], w.objects[0].pos)
    np.testing.assert_allclose(f[0, 2:4], w.objects[0].pos - w.effector_pos[0])
    assert np.all(f[1] == 0)  # second object slot empty


def test_min_jerk_profile_endpoints():
    p = min_jerk_profile(21)
    assert p[0] == 0 and p[-1] == pytest.approx(1.0)
    assert np.all(np.diff(p) >= 0)
    np.testing.assert_allclose(p + p[::-1], 1.0, atol=1e-12)


@pytest.mark.parametrize("kind", KINDS)
def test_clean_replay_succeeds(kind):
    for seed in range(100):
        spec = make_task(kind, seed)
        ep = generate_demo(spec, CorruptionSpec(), seed)
        res = replay(ep, spec)
        assert res.success and res.collision_free, (kind, seed)


@pytest.mark.parametrize("kind", KINDS)
def test_failure_injections(kind):
    spec = make_task(kind, 5)
    assert not replay(generate_demo(spec, CorruptionSpec(fail_goal=True), 0), spec).success
    assert not replay(generate_demo(spec, CorruptionSpec(cross_obstacle=True), 0), spec).collision_free


def test_replay_reproduces_recorded_states():
    spec = make_task("handover", 2)
    ep = generate_demo(spec, CorruptionSpec(jitter_std=0.004, drift_amp=0.01), 9)
    np.testing.assert_allclose(replay(ep, spec).states, ep.states, atol=1e-9)


def test_replay_task_mismatch():
    ep = generate_demo(make_task("pick_place", 0), CorruptionSpec(), 0)
    with pytest.raises(TaskMismatch):
        replay(ep, make_task("pick_place", 1))


def test_generate_demo_deterministic():
    spec = make_task("bimanual_lift", 4)
    c = CorruptionSpec(jitter_std=0.01, pause_prob=0.02)
    a, b = generate_demo(spec, c, 3), generate_demo(spec, c, 3)
    np.testing.assert_array_equal(a.actions, b.actions)
    assert not np.array_equal(a.actions, generate_demo(spec, c, 4).actions)


@pytest.mark.parametrize("kind", KINDS)
def test_heavy_jitter_raises_jerk(kind):
    spec = make_task(kind, 1)
    clean = episode_scores(generate_demo(spec, CorruptionSpec(), 0), UNIT_STATS)
    for seed in range(3):
        noisy = episode_scores(generate_demo(spec, CorruptionSpec(jitter_std=0.02), seed), UNIT_STATS)
        assert noisy.j_ep > 2 * clean.j_ep


def test_pauses_keep_coverage():
    spec = make_task("pick_place", 0)
    clean = episode_scores(generate_demo(spec, CorruptionSpec(), 0), UNIT_STATS)
    paused = episode_scores(generate_demo(spec, CorruptionSpec(pause_prob=0.05, pause_len=4), 0), UNIT_STATS)
    assert paused.coverage == pytest.approx(clean.coverage, rel=1e-6)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(KINDS))
def test_held_objects_follow_their_effector(seed, kind):
    spec = make_task(kind, seed % 50)
    ep = generate_demo(spec, CorruptionSpec(jitter_std=0.003), seed)
    _, trace = simulate(spec, ep.actions)
    for w in trace:
        for ob in w.objects:
            if ob.held_by is not None:
                np.testing.assert_allclose(ob.pos, w.effector_pos[ob.held_by], atol=1e-12)


def test_replay_policy_rollout_matches_open_loop_replay():
    spec = make_task("pick_place", 6)
    ep = generate_demo(spec, CorruptionSpec(jitter_std=0.002), 1)
    res = rollout_policy(ReplayPolicy(ep), spec, 0, stop_on_success=False, max_steps=ep.T)
    np.testing.assert_allclose(res.states[:-1], ep.states, atol=1e-12)  # rollout keeps the final state too
    assert res.success == replay(ep, spec).success


def test_corruption_config_errors_name_the_field():
    with pytest.raises(ConfigError, match="jitter_std"):
        CorruptionSpec.from_dict({"jitter_std": -1})
    with pytest.raises(ConfigError, match="colour"):
        CorruptionSpec.from_dict({"colour": 1})


def test_layouts_are_seeded():
    a, b = make_task("handover", 8), make_task("handover", 8)
    np.testing.assert_array_equal(a.objects[0][1], b.objects[0][1])
    assert a.task_id == "handover-0008"



def test_gain_scales_displacement():
    w = bare_world()
    w.gain = SIM_GAIN
    w2 = step(w, np.array([0.02, 0, 1, 0, 0, 1.0]))
    np.testing.assert_allclose(w2.effector_pos[0], [0.3 + SIM_GAIN * 0.02, 0.3])


@pytest.mark.parametrize("kind", KINDS)
def test_sim_domain_demos(kind):
    for seed in range(10):
        real, sim = make_task(kind, seed), make_task(kind, seed, "sim")
        np.testing.assert_array_equal(real.objects[0][1], sim.objects[0][1])
        ep = generate_demo(sim, CorruptionSpec(), seed)
        assert ep.source is Source.SIMULATED and ep.task_id.startswith("sim/")
        res = replay(ep, sim)
        assert res.success and res.collision_free, (kind, seed)
        # the same commands overshoot nothing in sim but fall short in the real world
        np.testing.assert_allclose(ep.states, generate_demo(real, CorruptionSpec(), seed).states, atol=1e-9)
        assert not np.allclose(simulate(real, ep.actions)[0], ep.states)


def test_sim_task_ids_roundtrip():
    spec = make_task("handover", 8, "sim")
    assert spec.task_id == "sim/handover-0008"
    back = task_from_id(spec.task_id)
    assert back.domain == "sim" and back.actuation_gain == SIM_GAIN
    assert task_from_id("handover-0008").domain == "real"
    with pytest.raises(ConfigError, match="domain"):
        make_task("handover", 8, "mars")
