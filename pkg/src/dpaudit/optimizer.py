"""DP-SGD with Poisson sampling and a full training transcript.

Each step samples a Poisson minibatch, clips every per-example gradient to
``clip_norm``, sums, adds ``N(0, (noise_multiplier * clip_norm)^2)`` per
coordinate and divides by ``max(|B|, 1)``. The resulting privatized
gradient is recorded even when the learning rate is zero.
"""

from __future__ import annotations

import dataclasses
from typing import Optional

import numpy as np

from dpaudit import model
from dpaudit.datasets import Dataset


@dataclasses.dataclass(frozen=True)
class DpConfig:
  clip_norm: float = 1.0
  noise_multiplier: float = 1.0
  learning_rate: float = 0.1
  sampling_rate: float = 0.1
  steps: int = 100
  seed: int = 0

  def __post_init__(self):
    if not self.clip_norm > 0:
      raise ValueError(f'clip_norm must be positive, got {self.clip_norm}')
    if not self.noise_multiplier >= 0:
      raise ValueError('noise_multiplier must be nonnegative')
    if not self.learning_rate >= 0:
      raise ValueError('learning_rate must be nonnegative')
    if not 0.0 <= self.sampling_rate <= 1.0:
      raise ValueError('sampling_rate must lie in [0, 1]')
    if self.steps < 0:
      raise ValueError('steps must be nonnegative')

  def replace(self, **changes) -> DpConfig:
    return dataclasses.replace(self, **changes)


@dataclasses.dataclass
class Transcript:
  """Everything a training run released, step by step.

  ``params[t + 1] == params[t] - learning_rate * released_updates[t]``
  holds exactly for every step.
  """

  params: list[np.ndarray]
  released_updates: list[np.ndarray]
  batch_sizes: list[int]

  @property
  def steps(self) -> int:
    return len(self.released_updates)

  @property
  def final(self) -> np.ndarray:
    return self.params[-1]


class TrainingHook:
  """Per-step callbacks through which an adversary can steer training.

  The default implementation changes nothing.
  """

  def dataset(self, step: int, transcript: Transcript,
              dataset: Dataset) -> Dataset:
    """Dataset to sample the minibatch of ``step`` (1-based) from."""
    return dataset

  def extra_gradient(self, step: int,
                     transcript: Transcript) -> Optional[np.ndarray]:
    """Optional gradient joining the batch with probability ``q``."""
    return None


def clip(v: np.ndarray, bound: float) -> np.ndarray:
  """Projects ``v`` onto the l2 ball of radius ``bound``."""
  if not bound > 0:
    raise ValueError('clip bound must be positive')
  v = np.asarray(v, dtype=np.float64)
  norm = np.linalg.norm(v)
  if norm <= bound:
    return v.copy()
  return v * (bound / norm)


def clip_rows(g: np.ndarray, bound: float) -> np.ndarray:
  norms = np.linalg.norm(g, axis=1, keepdims=True)
  scale = np.minimum(1.0, bound / np.maximum(norms, np.finfo(float).tiny))
  return g * scale


def poisson_sample(n: int, q: float, rng: np.random.Generator) -> np.ndarray:
  """Indices of a Poisson subsample: each of ``range(n)`` kept w.p. ``q``."""
  if not 0.0 <= q <= 1.0:
    raise ValueError('q must lie in [0, 1]')
  return np.flatnonzero(rng.random(n) < q)


def private_step(theta: np.ndarray, spec: model.ModelSpec, batch: Dataset,
                 cfg: DpConfig, rng: np.random.Generator,
                 extra: Optional[np.ndarray] = None,
                 check_clipping: bool = False):
  """One DP-SGD update on an already-sampled batch.

  Args:
    theta: Current parameters.
    spec: Model architecture.
    batch: The sampled examples (may be empty).
    cfg: Clipping, noise and learning-rate settings.
    rng: Source of the Gaussian noise.
    extra: Optional additional gradient treated as one more batch member.
    check_clipping: Assert every clipped contribution has norm <= C.

  Returns:
    ``(new_theta, released_update, batch_size)``.
  """
  c = cfg.clip_norm
  contributions = []
  if len(batch):
    contributions.append(
        per_example_clipped(theta, spec, batch.features, batch.targets, c))
  if extra is not None:
    extra = np.asarray(extra, dtype=np.float64)
    if not np.all(np.isfinite(extra)):
      raise FloatingPointError('non-finite injected gradient')
    contributions.append(clip(extra, c)[None, :])
  if contributions:
    stacked = np.concatenate(contributions)
    if check_clipping:
      assert np.all(np.linalg.norm(stacked, axis=1) <= c * (1 + 1e-12))
    total = stacked.sum(axis=0)
    size = stacked.shape[0]
  else:
    total = np.zeros_like(theta)
    size = 0
  noise = rng.normal(0.0, cfg.noise_multiplier * c, size=theta.shape)
  update = (total + noise) / max(size, 1)
  return theta - cfg.learning_rate * update, update, size


def per_example_clipped(theta, spec, x, y, c) -> np.ndarray:
  g = model.per_example_grads(theta, spec, x, y)
  if not np.all(np.isfinite(g)):
    raise FloatingPointError('non-finite per-example gradient')
  return clip_rows(g, c)


def train(spec: model.ModelSpec, dataset: Dataset, cfg: DpConfig,
          hook: Optional[TrainingHook] = None,
          theta0: Optional[np.ndarray] = None,
          rng: Optional[np.random.Generator] = None,
          check_clipping: bool = False) -> Transcript:
  """Runs ``cfg.steps`` DP-SGD steps and returns the transcript.

  With no ``theta0`` the model is initialized from ``cfg.seed``; with no
  ``rng`` the sampling/noise stream is also seeded from ``cfg.seed``. An
  extra gradient supplied by ``hook`` joins each batch independently with
  probability ``cfg.sampling_rate`` and is clipped like any other example.
  """
  if rng is None:
    rng = np.random.default_rng([cfg.seed, 1])
  if theta0 is None:
    theta0 = model.init_model(spec, cfg.seed)
  theta = np.array(theta0, dtype=np.float64)
  transcript = Transcript([theta], [], [])
  q = cfg.sampling_rate
  for step in range(1, cfg.steps + 1):
    data = dataset if hook is None else hook.dataset(step, transcript, dataset)
    idx = poisson_sample(len(data), q, rng)
    extra = None
    if hook is not None:
      candidate = hook.extra_gradient(step, transcript)
      # Always consume the coin so the noise stream does not depend on
      # whether the hook is active.
      coin = rng.random() < q
      if candidate is not None and coin:
        extra = candidate
    theta, update, size = private_step(
        theta, spec, data.subset(idx), cfg, rng, extra=extra,
        check_clipping=check_clipping)
    transcript.params.append(theta)
    transcript.released_updates.append(update)
    transcript.batch_sizes.append(size)
  return transcript
