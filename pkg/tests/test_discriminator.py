import hashlib

import numpy as np
import pytest

from demoforge.data import EpisodeArrays, Standardizer, instruction_embedding
from demoforge.discriminator import (Clip, ClipTable, DISC_PRESETS, DiscConfig, DiscTrainConfig, Discriminator,
                                     QualityDiscriminator, clamp_scores, pu_loss, ranking_auc, residual_energy,
                                     sample_subclips, score_to_weight, train_discriminator, zscore_logpi)
from demoforge.errors import (ChunkLongerThanEpisode, EmptyBatchSide, NoPositives, ScoreOutOfRange,
                              ShapeMismatch, SingleClip)
from demoforge.nn import Tensor
from demoforge.policy import DiffusionPolicy, ModelConfig, NoiseSchedule
from demoforge.sim.world import OBS_DIM

from oracles import auc as pairwise_auc
from oracles import finite_difference_check

L = 4
TINY = DiscConfig(layers=1, hidden=8, heads=2, mlp_ratio=2.0, chunk_length=L)
UNIT = Standardizer(np.zeros(6), np.ones(6))


def arrays(rng, T=20, eid="ep"):
    return EpisodeArrays(eid, rng.normal(size=(T, 6)), rng.normal(size=(T, 6)), rng.normal(size=(T, OBS_DIM)),
                         instruction_embedding("toy"))


def table(rng, n=6, logpi=None):
    clips = [Clip(f"e{i}", 1, rng.normal(size=6), rng.normal(size=(L, 6)), rng.normal(size=OBS_DIM),
                  instruction_embedding("toy"), 0.0 if logpi is None else logpi[i]) for i in range(n)]
    return ClipTable.build(clips, UNIT, UNIT)


# -- clip sampling ---------------------------------------------------------------------------
def test_subclips_whole_episode(rng):
    clips = sample_subclips(arrays(rng, T=L), K=8, L=L, seed=0)
    assert [c.start for c in clips] == [1]


def test_subclips_range_and_distinct(rng):
    ep = arrays(rng, T=160)
    clips = sample_subclips(ep, K=4, L=32, seed=3)
    starts = [c.start for c in clips]
    assert len(set(starts)) == 4 and all(1 <= s <= 129 for s in starts)
    for c in clips:
        np.testing.assert_array_equal(c.actions, ep.actions[c.start - 1:c.start + 31])
        np.testing.assert_array_equal(c.state, ep.states[c.start - 1])
    assert [c.start for c in sample_subclips(ep, K=4, L=32, seed=3)] == starts


def test_subclips_take_all_when_short(rng):
    assert [c.start for c in sample_subclips(arrays(rng, T=10), K=8, L=5, seed=0)] == [1, 2, 3, 4, 5, 6]


def test_subclips_too_long(rng):
    with pytest.raises(ChunkLongerThanEpisode):
        sample_subclips(arrays(rng, T=10), K=2, L=11, seed=0)


# -- log-pi proxy -------------------------------------------------------------------------------
def test_zscore_examples():
    np.testing.assert_allclose(zscore_logpi([1.0, 2.0, 3.0]), [1.224744871, 0.0, -1.224744871], atol=1e-8)
    np.testing.assert_array_equal(zscore_logpi([2.0, 2.0, 2.0]), [0.0, 0.0, 0.0])
    with pytest.raises(SingleClip):
        zscore_logpi([1.0])


def test_zscore_moments(rng):
    z = zscore_logpi(rng.gamma(2.0, size=500))
    assert abs(z.mean()) < 1e-12
    assert abs(z.var() - 1.0) < 1e-6


def policy_with_output(value, L=L):
    """A tiny policy whose noise head is forced to a constant."""
    cfg = ModelConfig(layers=1, hidden=8, heads=2, mlp_ratio=2.0, chunk_length=L)
    pol = DiffusionPolicy(cfg, NoiseSchedule(), UNIT, UNIT)
    pol.model.head.weight.data[...] = 0.0
    pol.model.head.bias.data[...] = value
    return pol


def test_energy_of_zero_denoiser_is_chi_square(rng):
    pol = policy_with_output(0.0)
    clips = [c for i in range(50) for c in sample_subclips(arrays(rng, T=40, eid=f"e{i}"), 4, L, seed=0)]
    E = residual_energy(pol, clips)
    # each energy averages 3 steps x L positions of a chi-square with 6 dof
    n_terms = 3 * L
    sigma = np.sqrt(2 * 6 / n_terms) / np.sqrt(len(E))
    assert abs(E.mean() - 6.0) < 3 * sigma


def test_energy_deterministic_and_frozen(rng, tmp_path):
    pol = policy_with_output(0.1)
    pol.save(tmp_path / "p.npz")
    before = hashlib.sha256((tmp_path / "p.npz").read_bytes()).hexdigest()
    params_before = [p.data.copy() for p in pol.model.parameters()]
    clips = sample_subclips(arrays(rng, T=30), 4, L, seed=1)
    e1 = residual_energy(pol, clips)
    e2 = residual_energy(pol, clips)
    np.testing.assert_array_equal(e1, e2)
    assert np.all(e1 >= 0)
    for a, p in zip(params_before, pol.model.parameters()):
        np.testing.assert_array_equal(a, p.data)
    assert hashlib.sha256((tmp_path / "p.npz").read_bytes()).hexdigest() == before


def test_energy_batching_is_invisible(rng):
    pol = policy_with_output(0.3)
    clips = sample_subclips(arrays(rng, T=40), 8, L, seed=2)
    np.testing.assert_array_equal(residual_energy(pol, clips, batch_size=3), residual_energy(pol, clips))


# -- model and loss ----------------------------------------------------------------------------
def test_pu_loss_hand_values():
    # 0.5 * -ln 0.9 + -ln 0.9 and 1.5 * ln 2, evaluated independently
    assert pu_loss(np.array([0.9]), np.array([0.1])).item() == pytest.approx(1.5 * np.log(10 / 9), abs=1e-12)
    assert pu_loss(np.array([0.9]), np.array([0.1])).item() == pytest.approx(0.1580408, abs=1e-7)
    assert pu_loss(np.array([0.5]), np.array([0.5])).item() == pytest.approx(1.039721, abs=1e-6)
    with pytest.raises(EmptyBatchSide):
        pu_loss(np.array([]), np.array([0.5]))


def test_pu_loss_minimum_at_bounds():
    grid = np.linspace(0.1, 0.9, 81)
    vals = np.array([[pu_loss(np.array([p]), np.array([u])).item() for u in grid] for p in grid])
    i, j = np.unravel_index(np.argmin(vals), vals.shape)
    assert grid[i] == pytest.approx(0.9) and grid[j] == pytest.approx(0.1)
    assert vals.max() <= 1.5 * -np.log(0.1) + 1e-12


def test_clamp_scores():
    np.testing.assert_allclose(clamp_scores(np.array([0.99, 0.5, 0.01])), [0.9, 0.5, 0.1])


def test_discriminator_shapes_and_range(rng):
    disc = Discriminator(TINY, UNIT, UNIT, seed=0)
    t = table(rng, n=5)
    s = disc.scores(t)
    assert s.shape == (5,) and np.all((0.1 <= s) & (s <= 0.9))
    np.testing.assert_array_equal(s, disc.scores(t))
    with pytest.raises(ShapeMismatch):
        disc.model(t.states, t.chunks[:, :-1], t.logpi, t.obs, t.instr)


def test_discriminator_loss_gradient(rng):
    model = QualityDiscriminator(TINY, rng)
    params = model.parameters()
    for p in params:
        p.data = p.data + rng.normal(scale=0.3, size=p.data.shape)
    t = table(rng, n=4, logpi=[0.5, -1.0, 1.2, 0.1])
    fn = lambda: pu_loss(model(*t.rows(np.arange(2))), model(*t.rows(np.arange(2, 4))))  # noqa: E731
    assert finite_difference_check(fn, params, max_entries=6) < 1e-4


def test_logpi_token_is_live(rng):
    disc = Discriminator(TINY, UNIT, UNIT, seed=1)
    a = disc.raw_scores(table(np.random.default_rng(0), n=3, logpi=[0.0, 0.0, 0.0]))
    b = disc.raw_scores(table(np.random.default_rng(0), n=3, logpi=[2.0, 2.0, 2.0]))
    assert np.abs(a - b).max() > 0


def test_training_reduces_loss_and_separates(rng):
    t = table(rng, n=40)
    positive = np.zeros(40, dtype=bool)
    positive[:20] = True
    t.chunks[:20] *= 0.1  # positives are calm, the rest are noisy
    disc = Discriminator(TINY, UNIT, UNIT, seed=0)
    losses = train_discriminator(disc, t, positive, DiscTrainConfig(steps=150, batch_size=16, lr=3e-3))
    assert np.mean(losses[-20:]) < np.mean(losses[:20])
    s = disc.scores(t)
    assert ranking_auc(s[:20], s[20:]) > 0.9


def test_training_needs_both_sides(rng):
    t = table(rng, n=4)
    disc = Discriminator(TINY, UNIT, UNIT)
    with pytest.raises(NoPositives):
        train_discriminator(disc, t, np.zeros(4, bool), DiscTrainConfig(steps=1))
    with pytest.raises(EmptyBatchSide):
        train_discriminator(disc, t, np.ones(4, bool), DiscTrainConfig(steps=1))


def test_checkpoint_roundtrip(rng, tmp_path):
    disc = Discriminator(TINY, UNIT, UNIT, seed=3)
    disc.save(tmp_path / "d.npz")
    t = table(rng)
    np.testing.assert_array_equal(Discriminator.load(tmp_path / "d.npz").scores(t), disc.scores(t))


# -- weights -------------------------------------------------------------------------------------
def test_odds_ratio_values():
    np.testing.assert_allclose(score_to_weight([0.5, 0.9, 0.1], normalize=False), [1.0, 9.0, 1 / 9])
    w = score_to_weight(np.linspace(0.1, 0.9, 17))
    assert w.mean() == pytest.approx(1.0, abs=1e-12)
    assert np.all(np.diff(w) > 0)
    with pytest.raises(ScoreOutOfRange):
        score_to_weight([0.95])


def test_identity_mapping_monotone():
    w = score_to_weight([0.2, 0.4, 0.8], mapping="identity")
    assert np.all(np.diff(w) > 0) and w.mean() == pytest.approx(1.0)


def test_ranking_auc_matches_pairwise(rng):
    for _ in range(20):
        pos = rng.integers(0, 5, size=rng.integers(1, 12)).astype(float)
        neg = rng.integers(0, 5, size=rng.integers(1, 12)).astype(float)
        assert ranking_auc(pos, neg) == pytest.approx(pairwise_auc(pos, neg), abs=1e-12)


def test_paper_preset_parameter_count():
    n = QualityDiscriminator(DISC_PRESETS["paper"], np.random.default_rng(0)).num_parameters()
    assert abs(n - 30e6) / 30e6 < 0.2
