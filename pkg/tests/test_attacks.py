import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats as sps

import oracles
from dpaudit import attacks, datasets, model, optimizer

SPEC = model.ModelSpec.logistic(4, 2)
MLP = model.ModelSpec.mlp(4, 3, 2)


@pytest.fixture(scope='module')
def data():
  return datasets.gen_synthetic(2, 4, 20, 3.0, seed=0)


@pytest.fixture(scope='module')
def pool():
  return datasets.gen_synthetic(2, 4, 40, 3.0, seed=1)


# ---------------------------------------------------------------- crafters


def test_random_pair_differs_by_one_pool_record(data, pool):
  pair = attacks.craft_random_pair(data, pool, np.random.default_rng(0))
  assert len(pair.augmented) == len(data) + 1
  assert pair.augmented.subset(range(len(data))) == data
  x, y = pair.differing
  assert any(np.array_equal(x, pool.features[i]) and
             np.array_equal(y, pool.targets[i]) for i in range(len(pool)))
  assert pair.choose(0) is data and pair.choose(1) is pair.augmented


def test_random_pair_is_uniform_over_pool(data):
  small = datasets.gen_synthetic(2, 4, 10, 3.0, seed=7)
  rng = np.random.default_rng(3)
  draws = []
  for _ in range(1000):
    x = attacks.craft_random_pair(data, small, rng).differing[0]
    draws.append(next(i for i in range(10)
                      if np.array_equal(small.features[i], x)))
  counts = np.bincount(draws, minlength=10)
  assert sps.chisquare(counts).pvalue > 0.001


def test_random_pair_rejects_empty_pool(data):
  with pytest.raises(ValueError):
    attacks.craft_random_pair(data, data.subset([]), np.random.default_rng(0))


def test_static_poison_without_ascent_is_the_start_record(data, pool):
  cfg = optimizer.DpConfig(steps=5)
  shadows = [model.init_model(SPEC, s) for s in range(3)]
  rng = np.random.default_rng(4)
  i = int(np.random.default_rng(4).integers(len(pool)))
  pair = attacks.craft_static_poison(data, pool, SPEC, cfg, rng, steps=0,
                                     shadows=shadows)
  assert np.array_equal(pair.differing[0], pool.features[i])
  assert np.array_equal(pair.differing[1], pool.targets[i])


def test_static_poison_raises_shadow_loss_within_bounds(data, pool):
  cfg = optimizer.DpConfig(steps=10, sampling_rate=0.5, noise_multiplier=0.5)
  rng = np.random.default_rng(5)
  shadows = attacks.train_shadows(SPEC, pool, 4, cfg, rng)
  start, y = pool.example(0)
  x = attacks.ascend_input(shadows, SPEC, start, y, 30, 0.2, data.bounds)
  before = np.mean([model.loss(t, SPEC, start, y) for t in shadows])
  after = np.mean([model.loss(t, SPEC, x, y) for t in shadows])
  assert after > before
  lo, hi = data.bounds
  assert np.all(x >= lo) and np.all(x <= hi)


def test_mixed_input_gradient_matches_finite_differences():
  rng = np.random.default_rng(6)
  for spec in (SPEC, MLP):
    theta = rng.normal(size=spec.num_params)
    x = rng.normal(size=4)
    v = rng.normal(size=spec.num_params)
    got = attacks._mixed_input_grad(theta, spec, x, 1, v)
    f = lambda x_: v @ model.per_example_grad(theta, spec, x_, 1)
    assert np.allclose(got, oracles.central_difference(f, x), rtol=1e-4,
                       atol=1e-6)


def test_adaptive_poison_descends_post_step_query_loss():
  theta = model.init_model(SPEC, 2)
  query = (np.array([0.5, -0.2, 0.1, 0.3]), np.array([0.0, 1.0]))
  x0, y0 = attacks.craft_adaptive_poison(theta, SPEC, query, 0, 0.5, 0.5)
  assert np.array_equal(x0, np.zeros(4)) and np.array_equal(y0, query[1])
  x, y = attacks.craft_adaptive_poison(theta, SPEC, query, 25, 0.5, 0.5)
  start = attacks.post_step_query_loss(theta, SPEC, x0, y0, query, 0.5)
  end = attacks.post_step_query_loss(theta, SPEC, x, y, query, 0.5)
  assert end < start
  again, _ = attacks.craft_adaptive_poison(theta, SPEC, query, 25, 0.5, 0.5)
  assert np.array_equal(x, again)


def test_malicious_dataset_has_vanishing_mean_gradient():
  for spec in (SPEC, MLP, model.ModelSpec.logistic(600, 10)):
    theta0 = model.init_model(spec, 9)
    d = attacks.craft_malicious_dataset(theta0, spec, 100,
                                        np.random.default_rng(9))
    g = model.per_example_grads(theta0, spec, d.features, d.targets)
    assert np.linalg.norm(g.mean(axis=0)) <= 1e-6
    assert np.allclose(d.targets.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    assert np.all((d.features >= 0) & (d.features <= 1))


def test_watermark_norm_and_signs():
  rng = np.random.default_rng(10)
  moves = [rng.normal(size=30) for _ in range(12)]
  plan, g = attacks.craft_gradient_watermark(moves, 30, clip_norm=1.5, size=8)
  assert np.linalg.norm(g) == pytest.approx(1.5, rel=1e-12)
  assert plan.signs.sum() == 0
  assert np.all(np.abs(g[plan.positions]) == pytest.approx(1.5 / math.sqrt(8)))
  assert np.count_nonzero(g) == 8


def test_watermark_positions_match_brute_force():
  rng = np.random.default_rng(11)
  for _ in range(20):
    moves = [np.round(rng.normal(size=6), 1) for _ in range(4)]
    got = attacks.select_watermark_positions(moves, 6, 2, 3)
    total = np.sum(np.abs(moves[:3]), axis=0)
    best = min(itertools.combinations(range(6), 2),
               key=lambda c: (sum(total[list(c)]), c))
    assert sorted(got) == list(best)


def test_watermark_ties_go_to_lowest_index():
  moves = [np.zeros(10)]
  assert list(attacks.select_watermark_positions(moves, 10, 4, 5)) == [0, 1, 2,
                                                                       3]


def test_watermark_size_validation():
  with pytest.raises(ValueError):
    attacks.select_watermark_positions([], 4, 6, 1)
  with pytest.raises(ValueError):
    attacks.select_watermark_positions([], 10, 3, 1)


# ----------------------------------------------------------- distinguishers


def test_loss_threshold_boundaries():
  theta = model.init_model(SPEC, 0)
  query = (np.ones(4), 1)
  loss = model.loss(theta, SPEC, *query)
  assert attacks.distinguish_loss_threshold(theta, SPEC, query, -1.0) == 0
  assert attacks.distinguish_loss_threshold(theta, SPEC, query, math.inf) == 1
  assert attacks.distinguish_loss_threshold(theta, SPEC, query, loss) == 1


def test_trajectory_statistic_modes():
  spec = model.ModelSpec.logistic(1, 2)
  query = (np.array([0.0]), 1)
  # Biases (0, b) give loss log(1 + e^-b); pick b so losses are 1 and 3.
  thetas = [np.array([0.0, 0.0, 0.0, -math.log(math.e**l - 1)])
            for l in (1.0, 3.0)]
  assert attacks.trajectory_statistic(thetas, spec, query, 'max') == (
      pytest.approx(3.0))
  assert attacks.trajectory_statistic(thetas, spec, query, 'mean') == (
      pytest.approx(2.0))
  assert attacks.distinguish_trajectory(thetas, spec, query, 3.5) == 1
  assert attacks.distinguish_trajectory(thetas, spec, query, 3.0 - 1e-9) == 0
  with pytest.raises(ValueError):
    attacks.trajectory_statistic([], spec, query)
  assert attacks.auto_mode(None) == 'max' and attacks.auto_mode(4.0) == 'mean'


def test_step_llr_hand_values():
  q, mean, std = 0.25, 2.0, 1.0
  d = np.array([0.0, 3.0])
  expected = [math.log(0.75 + 0.25 * math.exp((2 * x - 2) / 1.0)) for x in d]
  assert np.allclose(attacks.watermark_step_llr(d, q, mean, std), expected,
                     rtol=1e-14)
  # Full participation reduces to the Gaussian shift statistic.
  assert attacks.watermark_step_llr(np.array([1.0]), 1.0, mean, std)[0] == 0.0
  assert np.all(attacks.watermark_step_llr(d, 0.0, mean, std) == 0)


def test_step_llr_without_noise():
  llr = attacks.watermark_step_llr(np.array([0.0, 2.0]), 0.5, 2.0, 0.0)
  assert llr[0] == pytest.approx(math.log(0.5)) and llr[1] == math.inf


def test_step_llr_has_negative_null_mean():
  rng = np.random.default_rng(12)
  null = attacks.watermark_step_llr(rng.normal(size=200_000), 0.3, 1.0, 1.0)
  alt = attacks.watermark_step_llr(rng.normal(size=200_000) + 1.0, 1.0, 1.0,
                                   1.0)
  # E_null[LR] = 1, so E_null[LLR] <= 0; under the alternative it is positive.
  assert np.mean(np.exp(null)) == pytest.approx(1.0, abs=0.01)
  assert np.mean(null) < 0 < np.mean(alt)


@settings(max_examples=50, deadline=None)
@given(q=st.floats(0.01, 1.0), mean=st.floats(0.1, 5.0),
       std=st.floats(0.1, 5.0))
def test_step_llr_is_increasing(q, mean, std):
  d = np.linspace(-5, 5, 21)
  llr = attacks.watermark_step_llr(d, q, mean, std)
  assert np.all(np.diff(llr) >= 0)


def test_watermark_evidence_uses_only_steps_after_observation():
  plan = attacks.WatermarkPlan(np.array([0, 1]), np.array([1.0, -1.0]), 1.0, 2)
  wm = attacks.WatermarkModel(1.0, 1.0, 1.0, 2)
  noise = [np.array([100.0, -100.0, 0.0])] * 2
  tail = [np.array([0.5, -0.5, 9.0])] * 3
  # Signed sum 1.0 per tail step; mean 2 / sqrt(2) * sqrt(2) = 2, std sqrt 2.
  per_step = (wm.mean * 1.0 - 0.5 * wm.mean**2) / wm.std**2
  assert attacks.watermark_evidence(noise + tail, plan, wm) == pytest.approx(
      3 * per_step)
  assert attacks.watermark_evidence(noise, plan, wm) == 0.0
  assert attacks.distinguish_watermark(noise + tail, plan, wm,
                                       math.exp(3 * per_step) * 0.99) == 1


def test_batch_mixture_reduces_to_sum_model_for_empty_dataset():
  d = np.linspace(-3, 6, 10)
  plain = attacks.WatermarkModel(0.3, 1.2, 0.7, 16)
  mixed = attacks.WatermarkModel(0.3, 1.2, 0.7, 16, dataset_size=0)
  assert np.allclose(mixed.step_llr(d), plain.step_llr(d), rtol=1e-12)


def test_batch_mixture_full_participation_hand_value():
  n, sigma, size = 4, 0.8, 4
  wm = attacks.WatermarkModel(1.0, sigma, 1.0, size, dataset_size=n)
  d = np.array([0.1, 0.5])
  mean, std = math.sqrt(size), math.sqrt(size) * sigma
  expected = (sps.norm.logpdf(d, mean / (n + 1), std / (n + 1))
              - sps.norm.logpdf(d, 0, std / n))
  assert np.allclose(wm.step_llr(d), expected, rtol=1e-12)


def test_batch_mixture_likelihood_ratio_has_unit_null_mean():
  rng = np.random.default_rng(13)
  n, q, sigma, size = 20, 0.2, 1.0, 16
  wm = attacks.WatermarkModel(q, sigma, 1.0, size, dataset_size=n)
  b = np.maximum(rng.binomial(n, q, size=400_000), 1)
  d = rng.normal(size=b.size) * wm.std / b
  assert np.mean(np.exp(wm.step_llr(d))) == pytest.approx(1.0, abs=0.02)
