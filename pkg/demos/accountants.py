"""Two accountants, one DP-SGD run.

Run with ``python demos/accountants.py``. The script walks through the
privacy budget of a DP-SGD run on an MNIST-shaped task (batch 256 out of
60000) and shows:

1. how the RDP and GDP bounds move with the noise multiplier,
2. why the epoch count matters as much as the noise,
3. how to calibrate the noise for a target epsilon.
"""

from dpaudit import accountant

Q = 256 / 60000
DELTA = 1e-5


def table(epochs):
  steps = accountant.steps_from_epochs(epochs, Q)
  print(f'\n{epochs} epochs ({steps} steps), delta={DELTA}')
  print(f'{"sigma":>7} {"RDP":>8} {"GDP":>8} {"GDP fixed-batch":>16}')
  for sigma in (0.6, 0.868, 1.405, 2.3):
    spec = accountant.PrivacySpec(Q, sigma, steps, DELTA)
    print(f'{sigma:7.3f} {accountant.rdp_eps(spec):8.3f} '
          f'{accountant.gdp_eps(spec):8.3f} '
          f'{accountant.gdp_eps(spec, sampling="uniform"):16.3f}')


# RDP is a valid upper bound for any number of steps. GDP comes from a
# central limit theorem. It is usually smaller, and it depends on the
# sampling model. Poisson sampling (what the optimizer does) gives a smaller
# mu than fixed-size batches.
table(50)
table(60)

# More epochs cost privacy roughly like sqrt(T) for GDP and a bit faster for
# RDP at small sigma.
print('\nRDP epsilon at sigma=1.1 as training gets longer:')
for epochs in (1, 5, 15, 30, 60, 120):
  steps = accountant.steps_from_epochs(epochs, Q)
  eps = accountant.rdp_eps(accountant.PrivacySpec(Q, 1.1, steps, DELTA))
  print(f'  {epochs:4d} epochs: {eps:.3f}')

# Calibration inverts the RDP bound: the smallest sigma whose epsilon does
# not exceed the target. The CLI equivalent is
#   dpaudit calibrate --epsilon 2 --sampling-rate 0.00426667 --epochs 60
print('\nnoise needed for a 60-epoch run:')
steps = accountant.steps_from_epochs(60, Q)
for target in (0.5, 1.0, 2.0, 4.0, 8.0):
  sigma = accountant.calibrate_sigma(target, Q, steps, DELTA)
  spec = accountant.PrivacySpec(Q, sigma, steps, DELTA)
  print(f'  eps={target:4.1f}: sigma={sigma:.4f} '
        f'(RDP {accountant.rdp_eps(spec):.3f}, GDP {accountant.gdp_eps(spec):.3f})')
