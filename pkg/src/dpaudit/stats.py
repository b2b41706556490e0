"""From distinguisher outcomes to empirical epsilon.

A mechanism that is (eps, delta)-DP forces every distinguisher to satisfy
``FP + e^eps FN <= 1 - delta`` and ``FN + e^eps FP <= 1 - delta``.
Inverting those constraints at observed error rates gives a point estimate
of eps; inverting them at Clopper-Pearson upper limits of the error rates
gives a statistically valid lower bound.

Conventions:

* FP is guessing D' when the model was trained on D; FN the reverse.
* Rates are conditional: ``FP / (FP + TN)`` and ``FN / (FN + TP)``.
* ``conf`` is the coverage of the two-sided Clopper-Pearson interval of
  each rate; the lower bound uses the interval's upper endpoint, i.e. the
  one-sided ``(1 + conf) / 2`` quantile.
"""

from __future__ import annotations

import dataclasses
import logging
import math

import numpy as np
from scipy import optimize, special

logger = logging.getLogger(__name__)


@dataclasses.dataclass(frozen=True)
class Counts:
  tp: int = 0
  tn: int = 0
  fp: int = 0
  fn: int = 0
  invalid: int = 0

  @classmethod
  def from_outcomes(cls, bits, guesses, invalid: int = 0) -> Counts:
    b = np.asarray(bits, dtype=bool)
    s = np.asarray(guesses, dtype=bool)
    return cls(tp=int(np.sum(b & s)), tn=int(np.sum(~b & ~s)),
               fp=int(np.sum(~b & s)), fn=int(np.sum(b & ~s)),
               invalid=invalid)

  @property
  def negatives(self) -> int:
    return self.fp + self.tn

  @property
  def positives(self) -> int:
    return self.fn + self.tp

  @property
  def total(self) -> int:
    return self.tp + self.tn + self.fp + self.fn

  @property
  def fp_rate(self) -> float:
    return self.fp / self.negatives if self.negatives else 0.0

  @property
  def fn_rate(self) -> float:
    return self.fn / self.positives if self.positives else 0.0

  @property
  def accuracy(self) -> float:
    return (self.tp + self.tn) / self.total if self.total else 0.0


@dataclasses.dataclass(frozen=True)
class AuditResult:
  counts: Counts
  fp_rate: float
  fn_rate: float
  fp_high: float
  fn_high: float
  delta: float
  conf: float
  eps_empirical: float
  eps_lower: float
  # eps at the lower rate limits: the other end of the eps interval.
  fp_low: float = 0.0
  fn_low: float = 0.0
  eps_upper: float = math.inf


def clopper_pearson_upper(k: int, n: int, conf: float) -> float:
  """One-sided exact upper confidence limit for a binomial proportion.

  Solves ``P[Binomial(n, p) <= k] = 1 - conf`` for ``p``, i.e. the
  ``conf`` quantile of ``Beta(k + 1, n - k)``, by bisection on the
  regularized incomplete beta function.
  """
  if not 0 <= k <= n:
    raise ValueError(f'need 0 <= k <= n, got k={k}, n={n}')
  if not 0 < conf < 1:
    raise ValueError('conf must lie in (0, 1)')
  if k == n:
    return 1.0
  if k == 0:
    # Closed form 1 - (1 - conf)^(1/n), evaluated in extended precision so
    # the result is the correctly rounded double in all but rare cases.
    ld = np.longdouble
    return float(-np.expm1(np.log1p(-ld(conf)) / ld(n)))
  f = lambda p: special.betainc(k + 1, n - k, p) - conf
  return float(optimize.bisect(f, 0.0, 1.0, xtol=1e-15, rtol=1e-15,
                               maxiter=200))


def clopper_pearson_lower(k: int, n: int, conf: float) -> float:
  """One-sided exact lower confidence limit; mirror of the upper limit."""
  if not 0 <= k <= n:
    raise ValueError(f'need 0 <= k <= n, got k={k}, n={n}')
  return 1.0 - clopper_pearson_upper(n - k, n, conf)


def _log_ratio(num: float, den: float) -> float:
  if num <= 0:
    return -np.inf
  if den <= 0:
    return np.inf
  return math.log(num / den)


def eps_empirical(fp: float, fn: float, delta: float) -> float:
  """``max(log((1-delta-FP)/FN), log((1-delta-FN)/FP))``, floored at 0."""
  if not (0 <= fp <= 1 and 0 <= fn <= 1):
    raise ValueError('rates must lie in [0, 1]')
  if not 0 <= delta < 1:
    raise ValueError('delta must lie in [0, 1)')
  e = max(_log_ratio(1 - delta - fp, fn), _log_ratio(1 - delta - fn, fp))
  return max(e, 0.0)


def rate_upper_limits(counts: Counts, conf: float) -> tuple[float, float]:
  level = 0.5 * (1 + conf)
  return (clopper_pearson_upper(counts.fp, counts.negatives, level),
          clopper_pearson_upper(counts.fn, counts.positives, level))


def rate_lower_limits(counts: Counts, conf: float) -> tuple[float, float]:
  level = 0.5 * (1 + conf)
  return (clopper_pearson_lower(counts.fp, counts.negatives, level),
          clopper_pearson_lower(counts.fn, counts.positives, level))


def eps_lower(counts: Counts, delta: float, conf: float = 0.95) -> float:
  fp_high, fn_high = rate_upper_limits(counts, conf)
  return eps_empirical(fp_high, fn_high, delta)


def audit(counts: Counts, delta: float, conf: float = 0.95) -> AuditResult:
  fp_high, fn_high = rate_upper_limits(counts, conf)
  fp_low, fn_low = rate_lower_limits(counts, conf)
  return AuditResult(
      counts=counts,
      fp_rate=counts.fp_rate,
      fn_rate=counts.fn_rate,
      fp_high=fp_high,
      fn_high=fn_high,
      delta=delta,
      conf=conf,
      eps_empirical=eps_empirical(counts.fp_rate, counts.fn_rate, delta),
      eps_lower=eps_empirical(fp_high, fn_high, delta),
      fp_low=fp_low,
      fn_low=fn_low,
      eps_upper=eps_empirical(fp_low, fn_low, delta),
  )


@dataclasses.dataclass(frozen=True)
class Threshold:
  """A frozen decision rule on a scalar statistic.

  ``direction='below'`` guesses D' when ``stat <= tau`` (loss-style);
  ``'above'`` guesses D' when ``stat >= tau`` (evidence-style). ``strict``
  makes the 'below' comparison strict.
  """

  tau: float
  direction: str
  degenerate: bool = False
  strict: bool = False

  def guess(self, stat):
    stat = np.asarray(stat, dtype=np.float64)
    if self.direction == 'below':
      return stat < self.tau if self.strict else stat <= self.tau
    return stat >= self.tau


def _upper_limits(k: np.ndarray, n: int, level: float) -> np.ndarray:
  """Vectorized one-sided Clopper-Pearson upper limits at ``level``."""
  k = np.asarray(k)
  inner = np.minimum(k, n - 1)
  p = special.betaincinv(inner + 1, n - inner, level)
  return np.where(k >= n, 1.0, p)


def _eps_rows(fp, fn, delta):
  with np.errstate(divide='ignore', invalid='ignore'):
    e1 = np.where(1 - delta - fp > 0,
                  np.log(np.maximum(1 - delta - fp, 1e-300)) - np.log(fn),
                  -np.inf)
    e2 = np.where(1 - delta - fn > 0,
                  np.log(np.maximum(1 - delta - fn, 1e-300)) - np.log(fp),
                  -np.inf)
  return np.maximum(np.nan_to_num(e1, nan=-np.inf, posinf=np.inf),
                    np.nan_to_num(e2, nan=-np.inf, posinf=np.inf))


def select_threshold(stats, bits, delta: float, direction: str = 'below',
                     conf: float = 0.95) -> Threshold:
  """Chooses the threshold maximizing the lower bound on calibration data.

  Candidate rules split the sorted statistics between consecutive distinct
  values (plus the two all-or-nothing rules); the returned ``tau`` is the
  midpoint of the best gap. Each rule is scored by ``eps_empirical`` at the
  Clopper-Pearson upper limits of its calibration error rates; ties (most
  often several rules certifying nothing) go to the larger advantage
  ``1 - FPR - FNR``. Scoring by the point estimate instead is ill-posed:
  any rule with no errors in one class scores ``+inf``.

  Single-class calibration sets fall back to the median and are flagged as
  degenerate.
  """
  if direction not in ('below', 'above'):
    raise ValueError(f'unknown direction {direction!r}')
  s = np.asarray(stats, dtype=np.float64)
  b = np.asarray(bits, dtype=bool)
  if s.size == 0:
    raise ValueError('empty calibration set')
  n1 = int(b.sum())
  n0 = b.size - n1
  if n0 == 0 or n1 == 0 or np.any(np.isnan(s)):
    finite = s[np.isfinite(s)]
    tau = float(np.median(finite)) if finite.size else 0.0
    logger.warning('degenerate calibration set (%d/%d per class); tau=median',
                   n0, n1)
    return Threshold(tau, direction, degenerate=True)
  if direction == 'above':
    s = -s
  order = np.argsort(s, kind='stable')
  s, b = s[order], b[order]
  # Cut after position i (0 <= i <= n): first i values guessed D'.
  with np.errstate(invalid='ignore'):
    last_of_run = np.flatnonzero(np.diff(s) > 0)
  cuts = np.concatenate([[0], last_of_run + 1, [s.size]])
  pos_below = np.concatenate([[0], np.cumsum(b)])[cuts]
  neg_below = np.concatenate([[0], np.cumsum(~b)])[cuts]
  fp_k = neg_below
  fn_k = n1 - pos_below
  level = 0.5 * (1 + conf)
  # Clipped like the reported bound, so rules certifying nothing all tie.
  lower = np.maximum(_eps_rows(_upper_limits(fp_k, n0, level),
                               _upper_limits(fn_k, n1, level), delta), 0.0)
  advantage = 1 - fp_k / n0 - fn_k / n1
  best = int(np.lexsort((-advantage, -lower))[0])
  c = cuts[best]
  if c == 0:
    tau = s[0] - 1.0
  elif c == s.size:
    tau = s[-1] + 1.0
  else:
    a, z = s[c - 1], s[c]
    tau = 0.5 * (a + z) if np.isfinite(a + z) else (z if np.isfinite(z) else a)
  if direction == 'above':
    tau = -tau
  return Threshold(float(tau), direction)
