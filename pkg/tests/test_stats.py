import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from dpaudit import stats

DELTA = 1e-5


def test_zero_success_closed_form():
  for n in (1, 2, 10, 100, 1000, 10**4, 10**5, 10**6):
    for conf in (0.9, 0.95, 0.975, 0.99):
      with mpmath.workdps(50):
        exact = float(1 - (1 - mpmath.mpf(conf))**(mpmath.mpf(1) / n))
      assert stats.clopper_pearson_upper(0, n, conf) == exact
  assert stats.clopper_pearson_upper(0, 1000, 0.95) == pytest.approx(
      0.0029912, abs=1e-7)


@pytest.mark.parametrize('key', sorted(oracles.FROZEN['cp']))
def test_upper_limit_matches_tail_oracle(key):
  assert stats.clopper_pearson_upper(*key) == pytest.approx(
      oracles.FROZEN['cp'][key], abs=1e-8)


def test_upper_limit_solves_the_tail_equation():
  for k, n, conf in [(1, 10, 0.95), (7, 300, 0.975), (99, 100, 0.9)]:
    p = stats.clopper_pearson_upper(k, n, conf)
    assert float(oracles.binomial_tail(k, n, p)) == pytest.approx(
        1 - conf, abs=1e-10)


def test_all_successes_and_bad_arguments():
  assert stats.clopper_pearson_upper(5, 5, 0.95) == 1.0
  assert stats.clopper_pearson_lower(0, 5, 0.95) == 0.0
  with pytest.raises(ValueError):
    stats.clopper_pearson_upper(6, 5, 0.95)
  with pytest.raises(ValueError):
    stats.clopper_pearson_upper(1, 5, 1.0)


def test_lower_limit_mirrors_upper_limit():
  for k, n in [(0, 10), (3, 10), (50, 100), (999, 1000)]:
    lo = stats.clopper_pearson_lower(k, n, 0.975)
    hi = stats.clopper_pearson_upper(k, n, 0.975)
    assert lo <= k / n <= hi
    assert lo == pytest.approx(1 - stats.clopper_pearson_upper(n - k, n, 0.975))


@settings(max_examples=100, deadline=None)
@given(n=st.integers(1, 2000), data=st.data(),
       conf=st.sampled_from([0.9, 0.95, 0.975]))
def test_upper_limit_is_monotone(n, data, conf):
  k = data.draw(st.integers(0, n - 1))
  here = stats.clopper_pearson_upper(k, n, conf)
  assert here >= k / n
  assert stats.clopper_pearson_upper(k + 1, n, conf) >= here
  assert stats.clopper_pearson_upper(k, n, min(conf + 0.02, 0.99)) >= here


def test_upper_limit_coverage_by_simulation():
  rng = np.random.default_rng(0)
  n, sims = 200, 10_000
  for p in (0.01, 0.1, 0.5):
    ks = rng.binomial(n, p, size=sims)
    limits = {k: stats.clopper_pearson_upper(int(k), n, 0.95)
              for k in np.unique(ks)}
    covered = np.mean([limits[k] >= p for k in ks])
    # Exact intervals are conservative: coverage at or above nominal, up to
    # Monte Carlo error.
    assert covered >= 0.95 - 3 * math.sqrt(0.95 * 0.05 / sims)


def test_hand_evaluated_epsilon():
  assert stats.eps_empirical(0.25, 0.25, 0.0) == pytest.approx(
      math.log(3), abs=1e-12)
  for fp, fn in [(0.1, 0.3), (0.02, 0.4), (0.45, 0.45)]:
    assert stats.eps_empirical(fp, fn, DELTA) == pytest.approx(
        oracles.eps_from_rates(fp, fn, DELTA), abs=1e-12)


def test_epsilon_edge_cases():
  assert stats.eps_empirical(0.5, 0.5, 0.0) == 0.0
  assert stats.eps_empirical(0.6, 0.6, 0.0) == 0.0
  assert stats.eps_empirical(0.0, 0.5, 0.0) == math.inf
  assert stats.eps_empirical(0.0, 0.0, 0.0) == math.inf
  with pytest.raises(ValueError):
    stats.eps_empirical(1.5, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(fp=st.floats(0, 1), fn=st.floats(0, 1),
       delta=st.sampled_from([0.0, 1e-5, 1e-2]))
def test_epsilon_symmetric_and_nonnegative(fp, fn, delta):
  e = stats.eps_empirical(fp, fn, delta)
  assert e >= 0
  assert e == stats.eps_empirical(fn, fp, delta)


@settings(max_examples=200, deadline=None)
@given(fp=st.floats(0.001, 0.5), fn=st.floats(0.001, 0.5),
       bump=st.floats(0, 0.4))
def test_epsilon_monotone_in_rates(fp, fn, bump):
  assert stats.eps_empirical(min(fp + bump, 1), fn, DELTA) <= (
      stats.eps_empirical(fp, fn, DELTA) + 1e-12)


def test_power_ceiling_of_perfect_distinguisher():
  counts = stats.Counts(tp=1000, tn=1000)
  assert stats.eps_lower(counts, DELTA, 0.95) == pytest.approx(5.60, abs=0.05)
  assert stats.audit(counts, DELTA).eps_empirical == math.inf


def test_ceiling_grows_with_trials():
  prev = 0.0
  for n in (10, 100, 1000, 10_000):
    e = stats.eps_lower(stats.Counts(tp=n, tn=n), DELTA)
    assert e > prev
    prev = e


@settings(max_examples=100, deadline=None)
@given(tp=st.integers(0, 300), tn=st.integers(0, 300), fp=st.integers(0, 300),
       fn=st.integers(0, 300))
def test_interval_brackets_point_estimate(tp, tn, fp, fn):
  counts = stats.Counts(tp=tp, tn=tn, fp=fp, fn=fn)
  if counts.negatives == 0 or counts.positives == 0:
    return
  r = stats.audit(counts, DELTA)
  assert r.fp_low <= r.fp_rate <= r.fp_high
  assert r.fn_low <= r.fn_rate <= r.fn_high
  assert 0 <= r.eps_lower <= r.eps_empirical <= r.eps_upper


def test_counts_from_outcomes():
  c = stats.Counts.from_outcomes([0, 0, 1, 1, 1], [0, 1, 1, 0, 1], invalid=2)
  assert (c.tp, c.tn, c.fp, c.fn, c.invalid) == (2, 1, 1, 1, 2)
  assert c.fp_rate == 0.5 and c.fn_rate == pytest.approx(1 / 3)
  assert c.total == 5 and c.accuracy == 0.6


def test_threshold_on_separated_classes_is_midpoint():
  stats_ = [0.1, 0.2, 0.3, 1.0, 1.1, 1.2]
  bits = [1, 1, 1, 0, 0, 0]
  t = stats.select_threshold(stats_, bits, DELTA)
  assert t.tau == pytest.approx(0.65) and not t.degenerate
  assert list(t.guess(stats_)) == [True] * 3 + [False] * 3
  up = stats.select_threshold([-s for s in stats_], bits, DELTA, 'above')
  assert up.tau == pytest.approx(-0.65)
  assert list(up.guess([-s for s in stats_])) == [True] * 3 + [False] * 3


def test_threshold_on_null_data_certifies_nothing():
  rng = np.random.default_rng(0)
  s = rng.normal(size=400)
  bits = rng.integers(0, 2, size=400)
  t = stats.select_threshold(s, bits, DELTA)
  fresh = rng.normal(size=4000)
  fresh_bits = rng.integers(0, 2, size=4000)
  counts = stats.Counts.from_outcomes(fresh_bits, t.guess(fresh))
  assert stats.eps_lower(counts, DELTA) <= 0.05


def test_rules_certifying_nothing_tie_on_advantage():
  rng = np.random.default_rng(1)
  s = rng.normal(size=300)
  bits = rng.integers(0, 2, size=300).astype(bool)
  t = stats.select_threshold(s, bits, DELTA)

  def advantage(g):
    return 1 - np.mean(g[~bits]) - np.mean(~g[bits])

  best = max(advantage(s <= c) for c in np.concatenate([[-np.inf], s]))
  assert advantage(t.guess(s)) == pytest.approx(best)
  assert 0.1 < np.mean(t.guess(s)) < 0.9


def test_single_class_calibration_is_degenerate():
  t = stats.select_threshold([3.0, 1.0, 2.0], [1, 1, 1], DELTA)
  assert t.degenerate and t.tau == 2.0
  t = stats.select_threshold([3.0, np.nan, 2.0, 0.0], [1, 0, 1, 0], DELTA)
  assert t.degenerate and t.tau == 2.0


def test_threshold_boundary_is_inclusive_unless_strict():
  t = stats.Threshold(1.0, 'below')
  assert list(t.guess([0.5, 1.0, 1.5])) == [True, True, False]
  assert list(stats.Threshold(1.0, 'below', strict=True).guess(
      [0.5, 1.0])) == [True, False]
  assert list(stats.Threshold(1.0, 'above').guess([0.5, 1.0])) == [False, True]


def test_frozen_threshold_is_reused_verbatim():
  t = stats.select_threshold([0.0, 1.0, 2.0, 3.0], [1, 1, 0, 0], DELTA)
  before = t.tau
  t.guess(np.linspace(-10, 10, 50))
  assert t.tau == before
  with pytest.raises(AttributeError):
    t.tau = 0.0
