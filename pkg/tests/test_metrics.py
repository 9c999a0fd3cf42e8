import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from demoforge import metrics as M
from demoforge.errors import DimMismatch, EmptyDataset, TooShort

from conftest import make_episode
from oracles import naive_smoothness


def test_stats_single_episode():
    ep = make_episode(np.array([[0.0], [1.0], [2.0]] + [[1.0]] * 4))
    st_ = M.compute_normalization_stats([ep])
    assert st_.per_dim_min[0] == 0.0 and st_.per_dim_max[0] == 2.0


def test_stats_two_episodes():
    a = make_episode(np.linspace(-1, 1, 8))
    b = make_episode(np.linspace(0, 3, 8))
    st_ = M.compute_normalization_stats([a, b])
    assert st_.per_dim_min[0] == -1.0 and st_.per_dim_max[0] == 3.0


def test_stats_constant_dimension_flagged():
    ep = make_episode(np.full((8, 1), 0.5))
    st_ = M.compute_normalization_stats([ep])
    assert st_.per_dim_min[0] == st_.per_dim_max[0] == 0.5
    assert st_.zero_range[0]


def test_stats_errors():
    with pytest.raises(EmptyDataset):
        M.compute_normalization_stats([])
    with pytest.raises(DimMismatch):
        M.compute_normalization_stats([make_episode(np.zeros((8, 1))), make_episode(np.zeros((8, 2)))])


def test_normalize_endpoints_and_midpoint():
    stats = M.NormalizationStats(np.array([-2.0, 0.5]), np.array([4.0, 0.5]))
    x = np.array([[-2.0, 0.5], [4.0, 0.5], [1.0, 0.5]])
    out = M.normalize_states(x, stats)
    np.testing.assert_array_equal(out[:, 0], [0.0, 1.0, 0.5])
    # zero-range dimension maps to 0
    np.testing.assert_array_equal(out[:, 1], [0.0, 0.0, 0.0])
    with pytest.raises(DimMismatch):
        M.normalize_states(np.zeros((3, 3)), stats)


def test_kinematics_constant_and_linear():
    prof = M.kinematics(np.full((10, 3), 0.7), 0.05)
    assert prof.velocity.shape == (4, 3)
    assert not prof.velocity.any() and not prof.acceleration.any() and not prof.jerk.any()
    t = np.arange(1, 13, dtype=float)[:, None]
    prof = M.kinematics(2.5 * t, 1.0)
    np.testing.assert_allclose(prof.velocity, 2.5)
    np.testing.assert_allclose(prof.acceleration, 0.0, atol=1e-12)
    np.testing.assert_allclose(prof.jerk, 0.0, atol=1e-12)


def test_kinematics_quadratic_exact():
    T = 15
    t = np.arange(1, T + 1, dtype=float)
    prof = M.kinematics((t ** 2)[:, None], 1.0)
    assert prof.valid_range == (4, T - 3)
    valid_t = np.arange(4, T - 3 + 1)
    np.testing.assert_allclose(prof.velocity[:, 0], 2 * valid_t, rtol=1e-12)
    np.testing.assert_allclose(prof.acceleration[:, 0], 2.0, rtol=1e-12)
    np.testing.assert_allclose(prof.jerk[:, 0], 0.0, atol=1e-9)


def test_kinematics_too_short():
    with pytest.raises(TooShort):
        M.kinematics(np.zeros((6, 2)), 0.05)


def test_rms_hand_value():
    prof = M.KinematicsProfile(np.zeros((1, 2)), np.array([[3.0, 4.0]]), np.zeros((1, 2)), (4, 4))
    sc = M.smoothness_scores(prof, np.zeros((7, 2)))
    assert sc.a_ep == pytest.approx(3.5355339059327378, rel=1e-12)
    assert sc.j_ep == 0.0
    assert sc.coverage == 0.0


def test_stationary_episode_zero_coverage():
    ep = make_episode(np.full((20, 6), 0.3))
    stats = M.NormalizationStats(np.zeros(6), np.ones(6))
    sc = M.episode_scores(ep, stats)
    assert sc == M.SmoothnessScores(0.0, 0.0, 0.0)
    assert not M.coverage_eligible(sc, 6)


def test_matches_naive_oracle(rng):
    for _ in range(20):
        T = int(rng.integers(7, 60))
        D = int(rng.choice([1, 6, 36]))
        states = rng.normal(size=(T, D)).cumsum(axis=0)
        dt = float(rng.uniform(0.01, 0.2))
        ep = make_episode(states, dt=dt)
        stats = M.compute_normalization_stats([ep])
        got = M.episode_scores(ep, stats)
        a, j, c = naive_smoothness(states.tolist(), dt, stats.per_dim_min.tolist(), stats.per_dim_max.tolist())
        assert got.a_ep == pytest.approx(a, rel=1e-9)
        assert got.j_ep == pytest.approx(j, rel=1e-9)
        assert got.coverage == pytest.approx(c, rel=1e-9)


coef = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(c0=coef, c1=coef, c2=coef, c3=coef, T=st.integers(7, 40), dt=st.floats(0.01, 1.0))
def test_polynomial_exactness(c0, c1, c2, c3, T, dt):
    t = np.arange(1, T + 1, dtype=float) * dt
    quad = (c0 + c1 * t + c2 * t ** 2)[:, None]
    prof = M.kinematics(quad, dt)
    scale = 1.0 + abs(c1) + abs(c2) * t.max()
    np.testing.assert_allclose(prof.acceleration, 2 * c2, rtol=1e-9, atol=1e-9 * scale / dt)
    np.testing.assert_allclose(prof.jerk, 0.0, atol=1e-8 * scale / dt ** 2)
    cubic = (c0 + c1 * t + c2 * t ** 2 + c3 * t ** 3)[:, None]
    prof = M.kinematics(cubic, dt)
    # nested centered differences: D(t^3) = 3t^2 + h^2, D(3t^2) = 6t, D(6t) = 6
    scale3 = scale + abs(c3) * t.max() ** 2
    np.testing.assert_allclose(prof.jerk, 6 * c3, rtol=1e-9, atol=1e-7 * scale3 / dt ** 2)


@given(lam=st.floats(0.1, 10.0))
@settings(max_examples=25, deadline=None)
def test_scale_law(lam):
    rng = np.random.default_rng(0)
    s = rng.uniform(size=(30, 4))
    base = M.smoothness_scores(M.kinematics(s, 0.05), s)
    scaled = M.smoothness_scores(M.kinematics(lam * s, 0.05), lam * s)
    assert scaled.a_ep == pytest.approx(lam * base.a_ep, rel=1e-12)
    assert scaled.j_ep == pytest.approx(lam * base.j_ep, rel=1e-12)


def test_time_scale_law(rng):
    s = rng.uniform(size=(25, 3))
    p1, p2 = M.kinematics(s, 0.1), M.kinematics(s, 0.05)
    np.testing.assert_allclose(p2.velocity, 2 * p1.velocity, rtol=1e-12)
    np.testing.assert_allclose(p2.acceleration, 4 * p1.acceleration, rtol=1e-12)
    np.testing.assert_allclose(p2.jerk, 8 * p1.jerk, rtol=1e-12)


def test_noise_increases_scores():
    t = np.linspace(0, 1, 80)[:, None]
    smooth = 0.5 - 0.5 * np.cos(np.pi * t) * np.ones((1, 6))
    wins_a = wins_j = 0
    n = 100
    for seed in range(n):
        noisy = smooth + np.random.default_rng(seed).normal(0, 0.01, smooth.shape)
        base = M.smoothness_scores(M.kinematics(smooth, 0.05), smooth)
        pert = M.smoothness_scores(M.kinematics(noisy, 0.05), noisy)
        wins_a += pert.a_ep > base.a_ep
        wins_j += pert.j_ep > base.j_ep
    assert wins_a >= 0.99 * n and wins_j >= 0.99 * n


def test_determinism(rng):
    ep = make_episode(rng.normal(size=(50, 6)))
    stats = M.compute_normalization_stats([ep])
    assert M.episode_scores(ep, stats) == M.episode_scores(ep, stats)
