"""Crafters and distinguishers for the six adversary games.

Crafters build the neighbouring datasets (or the poison payload that is
fed to the trainer); distinguishers look at what training released and
guess which dataset was used. Everything here is a deterministic function
of its inputs and an explicit ``numpy`` generator.
"""

from __future__ import annotations

import dataclasses
import math
from typing import Optional, Sequence

import numpy as np
from scipy import special
from scipy import stats

from dpaudit import model
from dpaudit import optimizer
from dpaudit.datasets import Dataset


@dataclasses.dataclass(frozen=True)
class DatasetPair:
  """``augmented`` is ``base`` plus the single ``differing`` record."""

  base: Dataset
  augmented: Dataset
  differing: tuple[np.ndarray, np.ndarray]
  query: tuple[np.ndarray, np.ndarray]

  @classmethod
  def insert(cls, base: Dataset, x, y, query=None) -> DatasetPair:
    x = np.asarray(x, dtype=np.float64)
    y = model.targets(y, base.num_classes)[0]
    record = (x, y)
    return cls(base, base.with_example(x, y), record,
               record if query is None else query)

  def choose(self, bit: int) -> Dataset:
    return self.augmented if bit else self.base


@dataclasses.dataclass(frozen=True)
class WatermarkPlan:
  positions: np.ndarray
  signs: np.ndarray
  magnitude: float
  observation_steps: int

  def gradient(self, num_params: int) -> np.ndarray:
    g = np.zeros(num_params)
    g[self.positions] = self.signs * self.magnitude
    return g


# ---------------------------------------------------------------- crafters


def craft_random_pair(base: Dataset, pool: Dataset,
                      rng: np.random.Generator) -> DatasetPair:
  """Inserts a record drawn uniformly from a held-out pool."""
  if len(pool) == 0:
    raise ValueError('empty pool: nothing to sample the differing record from')
  i = int(rng.integers(len(pool)))
  x, y = pool.example(i)
  return DatasetPair.insert(base, x, y)


def train_shadows(spec: model.ModelSpec, shadow_pool: Dataset, n_shadow: int,
                  cfg: optimizer.DpConfig,
                  rng: np.random.Generator) -> list[np.ndarray]:
  """Final parameters of ``n_shadow`` models, each on a random half of the pool."""
  models = []
  for _ in range(n_shadow):
    seed = int(rng.integers(2**63))
    sub = rng.permutation(len(shadow_pool))[:max(1, len(shadow_pool) // 2)]
    t = optimizer.train(spec, shadow_pool.subset(sub), cfg.replace(seed=seed))
    models.append(t.final)
  return models


def ascend_input(shadows: Sequence[np.ndarray], spec: model.ModelSpec, x, y,
                 steps: int, input_lr: float, bounds) -> np.ndarray:
  """Gradient ascent on the mean shadow loss, clamped to ``bounds``."""
  x = np.array(x, dtype=np.float64)
  lo, hi = bounds
  for _ in range(steps):
    g = np.mean([model.input_grads(th, spec, x, y)[0] for th in shadows],
                axis=0)
    if not np.all(np.isfinite(g)):
      raise FloatingPointError(
          f'non-finite input gradient during poison ascent (x={x})')
    x = np.clip(x + input_lr * g, lo, hi)
  return x


def craft_static_poison(base: Dataset, shadow_pool: Dataset,
                        spec: model.ModelSpec, train_cfg: optimizer.DpConfig,
                        rng: np.random.Generator, n_shadow: int = 8,
                        steps: int = 50, input_lr: float = 0.1,
                        shadows: Optional[Sequence[np.ndarray]] = None
                        ) -> DatasetPair:
  """Poison that maximizes the loss of shadow models trained like the target.

  Starts from a random pool record and keeps its label. ``shadows`` may be
  supplied to skip shadow training.
  """
  if len(shadow_pool) == 0:
    raise ValueError('empty shadow pool')
  if shadows is None:
    shadows = train_shadows(spec, shadow_pool, n_shadow, train_cfg, rng)
  i = int(rng.integers(len(shadow_pool)))
  x0, y = shadow_pool.example(i)
  x = ascend_input(shadows, spec, x0, y, steps, input_lr, base.bounds)
  return DatasetPair.insert(base, x, y)


def _mixed_input_grad(theta, spec, x, y, v, h=1e-6):
  """grad_x <v, grad_theta loss(theta, x, y)>.

  By symmetry of mixed partials this equals the directional derivative of
  grad_x loss along ``v`` in parameter space, taken by central difference.
  """
  scale = h / max(np.linalg.norm(v), 1e-300)
  gp = model.input_grads(theta + scale * v, spec, x, y)[0]
  gm = model.input_grads(theta - scale * v, spec, x, y)[0]
  return (gp - gm) / (2 * scale)


def post_step_query_loss(theta, spec, poison_x, poison_y, query, model_lr):
  g = model.per_example_grad(theta, spec, poison_x, poison_y)
  return model.loss(theta - model_lr * g, spec, *query)


def craft_adaptive_poison(theta: np.ndarray, spec: model.ModelSpec,
                          query: tuple[np.ndarray, np.ndarray], steps: int,
                          input_lr: float, model_lr: float,
                          bounds=None) -> tuple[np.ndarray, np.ndarray]:
  """Poison whose one-step update lowers the query loss the most.

  Starts at ``x = 0`` with the query's label, simulates one SGD step on the
  poison, and descends the post-step query loss in ``x`` (a second-order
  derivative through the simulated step).
  """
  qx, qy = query
  y = qy
  x = np.zeros_like(np.asarray(qx, dtype=np.float64))
  for _ in range(steps):
    g = model.per_example_grad(theta, spec, x, y)
    stepped = theta - model_lr * g
    v = model.per_example_grad(stepped, spec, qx, qy)
    # d/dx L(theta - lr * g(x)) = -lr * grad_x <v, g(x)>
    dx = -model_lr * _mixed_input_grad(theta, spec, x, y, v)
    if not np.all(np.isfinite(dx)):
      raise FloatingPointError('non-finite gradient in adaptive poison')
    x = x - input_lr * dx
    if bounds is not None:
      x = np.clip(x, bounds[0], bounds[1])
  return x, np.array(y, dtype=np.float64)


def select_watermark_positions(movements: Sequence[np.ndarray], num_params: int,
                               size: int, observation_steps: int) -> np.ndarray:
  """The ``size`` coordinates with least cumulative movement.

  Movement is summed over the first ``min(observation_steps, available)``
  per-step vectors; ties go to the lowest index.
  """
  if size > num_params:
    raise ValueError(f'watermark size {size} exceeds {num_params} parameters')
  if size % 2:
    raise ValueError('watermark size must be even')
  used = list(movements)[:observation_steps]
  m = np.zeros(num_params)
  for u in used:
    m += np.abs(u)
  return np.argsort(m, kind='stable')[:size]


def craft_gradient_watermark(movements: Sequence[np.ndarray], num_params: int,
                             clip_norm: float, size: int = 16,
                             observation_steps: int = 10):
  """Alternating-sign watermark of l2 norm ``clip_norm`` on quiet coordinates.

  Returns ``(plan, gradient)``.
  """
  positions = select_watermark_positions(movements, num_params, size,
                                         observation_steps)
  signs = np.where(np.arange(size) % 2 == 0, 1.0, -1.0)
  plan = WatermarkPlan(positions, signs, clip_norm / math.sqrt(size),
                       observation_steps)
  return plan, plan.gradient(num_params)


def craft_malicious_dataset(theta0: np.ndarray, spec: model.ModelSpec, n: int,
                            rng: np.random.Generator, bounds=(0.0, 1.0)):
  """Random inputs soft-labelled with the initial model's own predictions.

  Every example then has zero loss gradient at ``theta0``.
  """
  lo = np.broadcast_to(np.asarray(bounds[0], dtype=float), (spec.input_dim,))
  hi = np.broadcast_to(np.asarray(bounds[1], dtype=float), (spec.input_dim,))
  x = lo + (hi - lo) * rng.random((n, spec.input_dim))
  p = model.predict_proba(theta0, spec, x)
  # Renormalize so each row sums to 1 to working precision.
  p = p / p.sum(axis=1, keepdims=True)
  return Dataset(x, p, (lo, hi))


# ----------------------------------------------------------- distinguishers


def distinguish_loss_threshold(theta, spec, query, tau: float) -> int:
  """1 (D') iff the query loss is at most ``tau``."""
  return int(model.loss(theta, spec, *query) <= tau)


def trajectory_statistic(models: Sequence[np.ndarray], spec, query,
                         mode: str = 'max') -> float:
  if len(models) == 0:
    raise ValueError('need at least one model')
  values = [model.loss(th, spec, *query) for th in models]
  if mode == 'max':
    return float(np.max(values))
  if mode == 'mean':
    return float(np.mean(values))
  raise ValueError(f'unknown mode {mode!r}')


def distinguish_trajectory(models: Sequence[np.ndarray], spec, query,
                           tau: float, mode: str = 'max') -> int:
  """1 (D') iff the max/mean query loss over the trajectory is below ``tau``."""
  return int(trajectory_statistic(models, spec, query, mode) < tau)


def auto_mode(target_eps: Optional[float]) -> str:
  return 'mean' if target_eps is not None and target_eps > 2 else 'max'


def watermark_step_llr(d, q: float, mean: float, std: float):
  """Log-likelihood ratio of H_watermark vs H_null for signed sums ``d``.

  H_null is ``N(0, std^2)``; H_watermark the mixture
  ``q N(mean, std^2) + (1 - q) N(0, std^2)``.
  """
  d = np.asarray(d, dtype=np.float64)
  if q <= 0:
    return np.zeros_like(d)
  if std == 0:
    hit = np.abs(d - mean) < np.abs(d)
    miss = np.log1p(-q) if q < 1 else -np.inf
    return np.where(hit, np.inf, miss)
  z = (mean * d - 0.5 * mean * mean) / (std * std)
  if q >= 1:
    return z
  return np.logaddexp(np.log1p(-q), np.log(q) + z)


def _log_normal(d, mean, std):
  z = (d - mean) / std
  return -0.5 * z * z - np.log(std) - 0.5 * math.log(2 * math.pi)


@dataclasses.dataclass(frozen=True)
class WatermarkModel:
  """Distribution of the watermark's signed sum in one released update.

  Without ``dataset_size`` the update is the noisy clipped sum, as in the
  privacy analysis. With it, the update is that sum divided by the Poisson
  batch size, which the distinguisher cannot observe; the likelihood then
  averages over ``Binomial(dataset_size, sampling_rate)`` batch sizes.
  """

  sampling_rate: float
  noise_multiplier: float
  clip_norm: float
  size: int
  dataset_size: Optional[int] = None

  @property
  def mean(self) -> float:
    # 2n alternating-sign coordinates of magnitude C / sqrt(2n).
    return math.sqrt(self.size) * self.clip_norm

  @property
  def std(self) -> float:
    return math.sqrt(self.size) * self.noise_multiplier * self.clip_norm

  def step_llr(self, d) -> np.ndarray:
    d = np.asarray(d, dtype=np.float64)
    q = self.sampling_rate
    if self.dataset_size is None:
      return watermark_step_llr(d, q, self.mean, self.std)
    if q <= 0:
      return np.zeros_like(d)
    if self.std == 0:
      miss = np.log1p(-q) if q < 1 else -np.inf
      return np.where(d != 0, np.inf, miss)
    b = np.arange(self.dataset_size + 1)
    log_w = stats.binom.logpmf(b, self.dataset_size, q)
    keep = log_w > log_w.max() - 40
    b, log_w = b[keep], log_w[keep]
    d = d[..., None]
    null = log_w + _log_normal(d, 0.0, self.std / np.maximum(b, 1))
    hit = log_w + _log_normal(d, self.mean / (b + 1), self.std / (b + 1))
    log_f0 = special.logsumexp(null, axis=-1)
    log_hit = special.logsumexp(hit, axis=-1)
    if q >= 1:
      return log_hit - log_f0
    return np.logaddexp(np.log1p(-q) + log_f0, math.log(q) + log_hit) - log_f0


def watermark_evidence(updates: Sequence[np.ndarray], plan: WatermarkPlan,
                       wm: WatermarkModel) -> float:
  """Accumulated log-likelihood ratio over the steps after observation."""
  tail = list(updates)[plan.observation_steps:]
  if not tail:
    return 0.0
  u = np.stack(tail)
  d = u[:, plan.positions] @ plan.signs
  return float(np.sum(wm.step_llr(d)))


def distinguish_watermark(updates: Sequence[np.ndarray], plan: WatermarkPlan,
                          wm: WatermarkModel, tau: float) -> int:
  """1 (D') iff accumulated evidence is at least ``log(tau)``."""
  log_tau = math.log(tau) if tau > 0 else -np.inf
  return int(watermark_evidence(updates, plan, wm) >= log_tau)
