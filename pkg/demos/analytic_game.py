"""How tight can an audit be, and how many trials does it need?

Run with ``python demos/analytic_game.py`` (about a minute on one core).

The strongest adversary controls the whole dataset and every gradient. Its
watermark either enters a step (with probability q) or it does not, and the
only thing that hides it is Gaussian noise. That game needs no model, so it
can be simulated directly on the watermark coordinates, at a million trials
in seconds.

The script shows:

1. the statistical ceiling: even a perfect distinguisher certifies only a
   bounded epsilon for a given number of trials;
2. the analytic game at growing trial counts, against the accountants;
3. the gap that remains. Most of it comes from the confidence interval
   and the sub-tight RDP bound, not from the attack.
"""

import math

import numpy as np
from scipy import optimize
from scipy import stats as sps

from dpaudit import accountant, games, stats

DELTA = 1e-5

# 1. Clopper-Pearson ceiling. With n trials per world and no errors at all,
# the certified epsilon still grows only like log(n).
print('perfect distinguisher, n trials per world:')
for n in (100, 1000, 10_000, 100_000):
  e = stats.eps_lower(stats.Counts(tp=n, tn=n), DELTA, 0.95)
  print(f'  n={n:>7}: eps_lower={e:.3f}')

# 2. The analytic game at a target epsilon of 2 (50 steps, q = 0.1).
q, steps, target = 0.1, 50, 2.0
sigma = accountant.calibrate_sigma(target, q, steps, DELTA)
spec = accountant.PrivacySpec(q, sigma, steps, DELTA)
print(f'\nsigma={sigma:.4f}: RDP eps={accountant.rdp_eps(spec):.3f}, '
      f'GDP eps={accountant.gdp_eps(spec):.3f}')
print(f'{"trials":>9} {"eps_lower":>10} {"point":>8} {"eps_upper":>10}  '
      'FP / FN')
for trials in (10**3, 10**4, 10**5, 10**6):
  r = games.analytic_game(q, sigma, 1.0, steps, 16, trials, DELTA, seed=1)
  a = r.audit
  print(f'{trials:9d} {a.eps_lower:10.3f} {a.eps_empirical:8.3f} '
        f'{a.eps_upper:10.3f}  {a.counts.fp}/{a.counts.negatives} '
        f'{a.counts.fn}/{a.counts.positives}')

# 3. Where the remaining gap comes from. A single Gaussian release with
# noise s is exactly (eps, delta)-DP when
#   Phi(1/(2s) - eps s) - e^eps Phi(-1/(2s) - eps s) = delta,
# and its FP/FN trade-off is FN = Phi(Phi^-1(1 - FP) - 1/s). Even an oracle
# threshold certifies epsilon only through estimated error rates, so the
# lower bound stays well short of the true value at these trial counts.
tight = lambda s: (sps.norm.cdf(0.5 / s - target * s) - math.exp(target)
                   * sps.norm.cdf(-0.5 / s - target * s) - DELTA)
s = optimize.brentq(tight, 0.1, 10)
print(f'\nexactly tight Gaussian mechanism (sigma={s:.4f}), oracle threshold:')
for per_world in (10**4, 10**5, 5 * 10**5):
  best = 0.0
  for fp in np.geomspace(1e-5, 0.1, 200):
    fn = sps.norm.cdf(sps.norm.ppf(1 - fp) - 1 / s)
    fp_k, fn_k = round(fp * per_world), round(fn * per_world)
    c = stats.Counts(tp=per_world - fn_k, tn=per_world - fp_k, fp=fp_k,
                     fn=fn_k)
    best = max(best, stats.eps_lower(c, DELTA, 0.95))
  print(f'  {per_world:>7} per world: best eps_lower ~ {best:.3f} '
        f'(true eps {target})')
