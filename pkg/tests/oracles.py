"""Independent reference computations used by the tests.

These deliberately avoid the code paths under test: RDP by numerical
quadrature of the Renyi divergence in high precision, binomial confidence
limits by bisection on the exact tail sum, gradients by central
differences. Values they produced are frozen in ``FROZEN`` so the test
suite does not depend on re-running slow oracles.
"""

from __future__ import annotations

import math

import mpmath
import numpy as np

mpmath.mp.dps = 40


def rdp_quadrature(q: float, sigma: float, alpha: float) -> float:
  """Per-step RDP of the Poisson-subsampled Gaussian at order ``alpha``.

  ``log E_{z ~ N(0, s^2)}[((1 - q) + q exp((2z - 1) / (2 s^2)))^alpha]
  / (alpha - 1)``, integrated with mpmath.
  """
  q = mpmath.mpf(q)
  s = mpmath.mpf(sigma)
  a = mpmath.mpf(alpha)

  def integrand(z):
    base = mpmath.npdf(z, 0, s)
    ratio = (1 - q) + q * mpmath.exp((2 * z - 1) / (2 * s * s))
    return base * ratio**a

  # Split at the crossing region so the quadrature sees both bumps.
  val = mpmath.quad(integrand, [-mpmath.inf, -10 * s, 0, 0.5, 1, 10 * s + a,
                                mpmath.inf])
  return float(mpmath.log(val) / (a - 1))


def binomial_tail(k: int, n: int, p) -> mpmath.mpf:
  p = mpmath.mpf(p)
  return mpmath.fsum(mpmath.binomial(n, i) * p**i * (1 - p)**(n - i)
                     for i in range(k + 1))


def cp_upper_by_tail(k: int, n: int, conf: float) -> float:
  """Solves ``P[Bin(n, p) <= k] = 1 - conf`` by bisection on the exact sum."""
  target = 1 - mpmath.mpf(conf)
  lo, hi = mpmath.mpf(0), mpmath.mpf(1)
  for _ in range(120):
    mid = (lo + hi) / 2
    if binomial_tail(k, n, mid) > target:
      lo = mid
    else:
      hi = mid
  return float((lo + hi) / 2)


def central_difference(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
  x = np.asarray(x, dtype=np.float64)
  g = np.empty_like(x)
  for i in range(x.size):
    e = np.zeros_like(x)
    e[i] = h
    g[i] = (f(x + e) - f(x - e)) / (2 * h)
  return g


def eps_from_rates(fp: float, fn: float, delta: float) -> float:
  """Hand evaluation of the empirical epsilon formula."""
  a = math.log((1 - delta - fp) / fn)
  b = math.log((1 - delta - fn) / fp)
  return max(a, b, 0.0)


# Values produced by the oracles above; tests/test_oracles.py re-derives
# them.
FROZEN = {
    # (q, sigma, alpha) -> rdp_quadrature
    'rdp': {
        (0.01, 1.0, 2.0): 0.00017181342207454794,
        (0.01, 1.0, 2.5): 0.00021757533228188047,
        (0.1, 2.0, 8.0): 0.013725430103219919,
        (0.1, 2.0, 12.75): 0.02737489476350131,
        (256 / 60000, 1.1, 32.0): 7.590188346210109,
        (256 / 60000, 1.1, 10.5): 0.00013216541130752266,
    },
    # (k, n, conf) -> cp_upper_by_tail
    'cp': {
        (2, 1000, 0.95): 0.006282284546723426,
        (5, 200, 0.975): 0.05737435112684586,
        (50, 100, 0.95): 0.5863782853690882,
    },
}
