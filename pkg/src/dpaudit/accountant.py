"""Upper bounds on (epsilon, delta) for DP-SGD.

Two accountants are provided:

* RDP of the Poisson-subsampled Gaussian mechanism, composed linearly over
  steps and converted with ``eps = T * rdp(a) + log(1/delta) / (a - 1)``
  minimized over a fixed grid of orders.
* Gaussian DP via the central-limit approximation
  ``mu = q * sqrt(T) * sqrt(exp(1/sigma^2) - 1)`` (Poisson sampling; a
  fixed-batch variant is available), converted through the exact mu-GDP
  (epsilon, delta) curve.

All binomial sums run in the log domain.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np
from scipy import optimize, special, stats

DEFAULT_ORDERS = tuple(
    [1.0 + 0.25 * i for i in range(1, 253)] + list(range(65, 257)))


class CalibrationError(ValueError):
  """Raised when no noise multiplier reaches the requested epsilon."""


@dataclasses.dataclass(frozen=True)
class PrivacySpec:
  sampling_rate: float
  noise_multiplier: float
  steps: int
  delta: float = 1e-5

  def __post_init__(self):
    if not 0.0 < self.delta < 1.0:
      raise ValueError('delta must lie in (0, 1)')
    if not 0.0 <= self.sampling_rate <= 1.0:
      raise ValueError('sampling_rate must lie in [0, 1]')
    if self.noise_multiplier < 0 or self.steps < 0:
      raise ValueError('noise_multiplier and steps must be nonnegative')


@dataclasses.dataclass(frozen=True)
class RdpCurve:
  orders: np.ndarray
  eps: np.ndarray  # cost of one step at each order

  def compose(self, steps: int) -> RdpCurve:
    return RdpCurve(self.orders, self.eps * steps)


def steps_from_epochs(epochs: float, q: float) -> int:
  """Number of Poisson steps in ``epochs`` passes: ``floor(epochs / q)``."""
  return int(math.floor(epochs / q + 1e-9))


def _log_comb(n, k):
  return special.gammaln(n + 1) - special.gammaln(k + 1) - special.gammaln(
      n - k + 1)


def _log_a_int(q: float, sigma: float, alpha: int) -> float:
  k = np.arange(alpha + 1, dtype=np.float64)
  terms = (_log_comb(alpha, k) + k * math.log(q) + (alpha - k) * math.log1p(-q)
           + k * (k - 1) / (2 * sigma**2))
  return float(special.logsumexp(terms))


def _log_a_frac(q: float, sigma: float, alpha: float,
                tol: float = 30.0, max_terms: int = 1 << 20) -> float:
  # Splits the integral at z0 where the two mixture densities cross; each
  # half is a binomial series in i that alternates once i > alpha, so the
  # truncation error is below the first omitted term.
  z0 = sigma**2 * math.log(1 / q - 1) + 0.5
  pos = np.full(2, -np.inf)
  neg = np.full(2, -np.inf)
  start, size = 0, 64
  while start < max_terms:
    i = np.arange(start, start + size, dtype=np.float64)
    j = alpha - i
    coef = special.binom(alpha, i)
    log_coef = np.log(np.abs(coef))
    log_half_erfc0 = special.log_ndtr(-(i - z0) / sigma)
    log_half_erfc1 = special.log_ndtr(-(z0 - j) / sigma)
    s0 = (log_coef + i * math.log(q) + j * math.log1p(-q)
          + (i * i - i) / (2 * sigma**2) + log_half_erfc0)
    s1 = (log_coef + j * math.log(q) + i * math.log1p(-q)
          + (j * j - j) / (2 * sigma**2) + log_half_erfc1)
    terms = np.stack([s0, s1])
    positive = coef > 0
    pos = np.logaddexp(pos, special.logsumexp(
        np.where(positive, terms, -np.inf), axis=1))
    neg = np.logaddexp(neg, special.logsumexp(
        np.where(positive, -np.inf, terms), axis=1))
    start += size
    size *= 2
    if start <= alpha + 1:
      continue
    with np.errstate(invalid='ignore'):
      total = np.logaddexp.reduce(pos + np.log1p(-np.exp(neg - pos)))
    if np.isnan(total) or np.any(neg > pos):
      return np.inf
    if np.max(terms[:, -1]) < total - tol:
      return float(total)
  return np.inf


def rdp_one_step(q: float, noise_multiplier: float,
                 orders=DEFAULT_ORDERS) -> RdpCurve:
  """Per-order RDP of one Poisson-subsampled Gaussian step.

  Returns ``+inf`` entries (never NaN) where a term overflows.
  """
  orders = np.asarray(orders, dtype=np.float64)
  if orders.size == 0:
    raise ValueError('empty order grid')
  if np.any(orders <= 1):
    raise ValueError('Renyi orders must exceed 1')
  sigma = float(noise_multiplier)
  if sigma <= 0:
    return RdpCurve(orders, np.full(orders.shape, np.inf))
  if q == 0:
    return RdpCurve(orders, np.zeros(orders.shape))
  if q == 1:
    return RdpCurve(orders, orders / (2 * sigma**2))
  eps = np.empty(orders.shape)
  for i, a in enumerate(orders):
    if float(a).is_integer():
      log_a = _log_a_int(q, sigma, int(a))
    else:
      log_a = _log_a_frac(q, sigma, float(a))
    eps[i] = log_a / (a - 1) if np.isfinite(log_a) else np.inf
  eps = np.where(np.isnan(eps), np.inf, np.maximum(eps, 0.0))
  return RdpCurve(orders, eps)


def eps_from_rdp(curve: RdpCurve, steps: int,
                 delta: float) -> tuple[float, float]:
  """Converts a one-step curve composed over ``steps`` into (eps, order)."""
  if curve.orders.size == 0:
    raise ValueError('empty order grid')
  if not 0.0 < delta < 1.0:
    raise ValueError('delta must lie in (0, 1)')
  with np.errstate(invalid='ignore'):
    total = steps * curve.eps + math.log(1 / delta) / (curve.orders - 1)
  total = np.where(np.isnan(total), np.inf, total)
  # Last index wins ties so T = 0 reports the largest order.
  best = len(total) - 1 - int(np.argmin(total[::-1]))
  return max(float(total[best]), 0.0), float(curve.orders[best])


def rdp_eps(spec: PrivacySpec, orders=DEFAULT_ORDERS) -> float:
  curve = rdp_one_step(spec.sampling_rate, spec.noise_multiplier, orders)
  return eps_from_rdp(curve, spec.steps, spec.delta)[0]


def gdp_mu(q: float, noise_multiplier: float, steps: float,
           sampling: str = 'poisson') -> float:
  """CLT approximation of the composed mechanism's GDP parameter.

  ``sampling='poisson'`` gives ``q sqrt(T) sqrt(exp(1/sigma^2) - 1)``;
  ``'uniform'`` gives the fixed-size-batch variant
  ``sqrt(2) q sqrt(T) sqrt(exp(1/sigma^2) Phi(1.5/sigma)
  + 3 Phi(-0.5/sigma) - 2)``.
  """
  if noise_multiplier <= 0:
    return np.inf
  s = noise_multiplier
  if sampling == 'poisson':
    return q * math.sqrt(steps) * math.sqrt(math.expm1(s**-2))
  if sampling == 'uniform':
    inner = (math.exp(s**-2) * stats.norm.cdf(1.5 / s)
             + 3 * stats.norm.cdf(-0.5 / s) - 2)
    return math.sqrt(2) * q * math.sqrt(steps) * math.sqrt(inner)
  raise ValueError(f'unknown sampling scheme {sampling!r}')


def gdp_delta(eps: float, mu: float) -> float:
  """delta(eps) of the mu-GDP trade-off curve."""
  a = stats.norm.cdf(-eps / mu + mu / 2)
  b = eps + stats.norm.logcdf(-eps / mu - mu / 2)
  return float(a - math.exp(b))


def eps_from_mu(mu: float, delta: float) -> float:
  """Smallest eps with ``delta(eps) <= delta`` for mu-GDP."""
  if mu == 0:
    return 0.0
  if not np.isfinite(mu):
    return np.inf
  f = lambda e: gdp_delta(e, mu) - delta
  if f(0.0) <= 0:
    return 0.0
  hi = 1.0
  while f(hi) > 0:
    hi *= 2
    if hi > 1e6:
      raise ArithmeticError(f'cannot bracket eps for mu={mu}')
  return float(optimize.brentq(f, 0.0, hi, xtol=1e-12, rtol=1e-12))


def gdp_eps(spec: PrivacySpec, sampling: str = 'poisson') -> float:
  if spec.noise_multiplier <= 0:
    return np.inf
  mu = gdp_mu(spec.sampling_rate, spec.noise_multiplier, spec.steps,
              sampling)
  return eps_from_mu(mu, spec.delta)


def epsilon(spec: PrivacySpec, method: str = 'rdp') -> float:
  if method == 'rdp':
    return rdp_eps(spec)
  if method == 'gdp':
    return gdp_eps(spec)
  raise ValueError(f"unknown accountant '{method}'")


def calibrate_sigma(target_eps: float, q: float, steps: int, delta: float,
                    method: str = 'rdp', max_sigma: float = 1e6) -> float:
  """Smallest-found noise multiplier with eps in ``[target(1-1e-3), target]``.

  Raises:
    CalibrationError: If even ``max_sigma`` leaves eps above target.
  """
  if not target_eps > 0:
    raise ValueError('target epsilon must be positive')
  eps_at = lambda s: epsilon(PrivacySpec(q, s, steps, delta), method)
  lo, hi = 0.0, 1.0
  while eps_at(hi) > target_eps:
    lo, hi = hi, hi * 2
    if hi > max_sigma:
      raise CalibrationError(
          f'epsilon {target_eps} unreachable with noise multiplier <= '
          f'{max_sigma:g} ({method}, q={q}, T={steps}, delta={delta})')
  # Invariant: eps(lo) > target >= eps(hi); eps(0) = inf.
  for _ in range(200):
    e = eps_at(hi)
    if e >= target_eps * (1 - 1e-3):
      return hi
    mid = 0.5 * (lo + hi)
    if eps_at(mid) > target_eps:
      lo = mid
    else:
      hi = mid
  raise CalibrationError(f'bisection did not converge for eps={target_eps}')


def gaussian_mechanism_sigma(eps: float, delta: float) -> float:
  """Classic calibration ``sqrt(2 log(1.25/delta)) / eps`` for sensitivity 1."""
  if not eps > 0 or not 0 < delta < 1:
    raise ValueError('need eps > 0 and delta in (0, 1)')
  return math.sqrt(2 * math.log(1.25 / delta)) / eps
