"""Small differentiable classifiers with per-example gradients.

Two architectures are supported, both trained with softmax cross-entropy:

* ``logistic(d, k)``: multinomial logistic regression.
* ``mlp(d, h, k)``: one hidden layer with ``tanh`` activation.

Parameters live in a single flat ``float64`` vector. The layout is
row-major weights followed by biases, layer by layer::

    logistic: W (k, d) | b (k)
    mlp:      W1 (h, d) | b1 (h) | W2 (k, h) | b2 (k)

``tanh`` was picked for the hidden layer because it is smooth everywhere,
so finite-difference checks never land on a kink.

Labels are either a class index or a probability vector over the ``k``
classes. Internally everything is converted to a target matrix of shape
``(n, k)``.
"""

from __future__ import annotations

import dataclasses
from typing import Union

import numpy as np
from scipy import special

Label = Union[int, np.integer, np.ndarray]


@dataclasses.dataclass(frozen=True)
class ModelSpec:
  """Architecture description.

  Attributes:
    input_dim: Feature dimension ``d``.
    num_classes: Number of output classes ``k``.
    hidden: Hidden width ``h``; ``None`` for logistic regression.
  """

  input_dim: int
  num_classes: int
  hidden: int | None = None

  def __post_init__(self):
    dims = [self.input_dim, self.num_classes]
    if self.hidden is not None:
      dims.append(self.hidden)
    if any(int(v) <= 0 for v in dims):
      raise ValueError(f'model dimensions must be positive, got {self}')

  @classmethod
  def logistic(cls, d: int, k: int) -> ModelSpec:
    return cls(d, k)

  @classmethod
  def mlp(cls, d: int, h: int, k: int) -> ModelSpec:
    return cls(d, k, h)

  @property
  def architecture(self) -> str:
    return 'logistic' if self.hidden is None else 'mlp'

  @property
  def num_params(self) -> int:
    d, k, h = self.input_dim, self.num_classes, self.hidden
    if h is None:
      return d * k + k
    return d * h + h + h * k + k

  def unpack(self, theta: np.ndarray) -> tuple[np.ndarray, ...]:
    """Splits a flat parameter vector into layer arrays (views)."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (self.num_params,):
      raise ValueError(
          f'expected {self.num_params} parameters, got shape {theta.shape}')
    d, k, h = self.input_dim, self.num_classes, self.hidden
    if h is None:
      return theta[:k * d].reshape(k, d), theta[k * d:]
    o = 0
    w1 = theta[o:o + h * d].reshape(h, d)
    o += h * d
    b1 = theta[o:o + h]
    o += h
    w2 = theta[o:o + k * h].reshape(k, h)
    o += k * h
    b2 = theta[o:]
    return w1, b1, w2, b2


def init_model(spec: ModelSpec, seed: int) -> np.ndarray:
  """Draws initial parameters, each ~ N(0, 1/fan_in) of its layer.

  Pure function of ``(spec, seed)``.
  """
  rng = np.random.default_rng(seed)
  d, k, h = spec.input_dim, spec.num_classes, spec.hidden
  if h is None:
    fan_ins = [(k * d + k, d)]
  else:
    fan_ins = [(h * d + h, d), (k * h + k, h)]
  parts = [rng.normal(0.0, 1.0 / np.sqrt(fan), size) for size, fan in fan_ins]
  return np.concatenate(parts)


def targets(labels, num_classes: int) -> np.ndarray:
  """Converts hard or soft labels into an ``(n, k)`` target matrix.

  Accepts a single label (int or length-``k`` vector) or a batch (1-D int
  array or 2-D probability matrix).
  """
  y = np.asarray(labels)
  if y.ndim == 0 or (y.ndim == 1 and np.issubdtype(y.dtype, np.integer)):
    idx = np.atleast_1d(y).astype(np.int64)
    if np.any(idx < 0) or np.any(idx >= num_classes):
      raise ValueError(f'label out of range [0, {num_classes})')
    out = np.zeros((idx.size, num_classes))
    out[np.arange(idx.size), idx] = 1.0
    return out
  y = np.atleast_2d(y.astype(np.float64))
  if y.shape[1] != num_classes:
    raise ValueError(f'soft labels must have {num_classes} entries')
  if np.any(y < 0) or np.any(np.abs(y.sum(axis=1) - 1.0) > 1e-9):
    raise ValueError('soft labels must be nonnegative and sum to 1')
  return y


def _features(x, spec: ModelSpec) -> np.ndarray:
  x = np.atleast_2d(np.asarray(x, dtype=np.float64))
  if x.shape[1] != spec.input_dim:
    raise ValueError(
        f'feature dimension {x.shape[1]} does not match model input '
        f'dimension {spec.input_dim}')
  return x


def _forward(theta, spec, x):
  """Returns logits and the cache needed for backprop."""
  if spec.hidden is None:
    w, b = spec.unpack(theta)
    return x @ w.T + b, None
  w1, b1, w2, b2 = spec.unpack(theta)
  a = np.tanh(x @ w1.T + b1)
  return a @ w2.T + b2, a


def predict_proba(theta: np.ndarray, spec: ModelSpec, x) -> np.ndarray:
  """Softmax outputs, shape ``(n, k)``."""
  logits, _ = _forward(theta, spec, _features(x, spec))
  return special.softmax(logits, axis=1)


def losses(theta: np.ndarray, spec: ModelSpec, x, y) -> np.ndarray:
  """Per-example cross-entropy for a batch."""
  x = _features(x, spec)
  t = targets(y, spec.num_classes)
  logits, _ = _forward(theta, spec, x)
  logp = special.log_softmax(logits, axis=1)
  # 0 * log p is taken as 0 even when p underflows.
  out = -np.sum(np.where(t > 0, t * logp, 0.0), axis=1)
  return np.maximum(out, 0.0)


def loss(theta: np.ndarray, spec: ModelSpec, x, y) -> float:
  """Cross-entropy of a single example ``(x, y)``."""
  return float(losses(theta, spec, x, y)[0])


def per_example_grads(theta: np.ndarray, spec: ModelSpec, x, y) -> np.ndarray:
  """Gradients of every example's loss, shape ``(n, num_params)``."""
  x = _features(x, spec)
  t = targets(y, spec.num_classes)
  if t.shape[0] != x.shape[0]:
    raise ValueError('features and labels disagree on batch size')
  logits, a = _forward(theta, spec, x)
  delta = special.softmax(logits, axis=1) - t  # dL/dlogits, (n, k)
  n = x.shape[0]
  if spec.hidden is None:
    gw = delta[:, :, None] * x[:, None, :]
    return np.concatenate([gw.reshape(n, -1), delta], axis=1)
  _, _, w2, _ = spec.unpack(theta)
  gw2 = delta[:, :, None] * a[:, None, :]
  dz = (delta @ w2) * (1.0 - a * a)
  gw1 = dz[:, :, None] * x[:, None, :]
  return np.concatenate(
      [gw1.reshape(n, -1), dz, gw2.reshape(n, -1), delta], axis=1)


def per_example_grad(theta: np.ndarray, spec: ModelSpec, x, y) -> np.ndarray:
  """Gradient of a single example's loss with respect to ``theta``."""
  x = np.asarray(x, dtype=np.float64)
  if x.ndim != 1:
    raise ValueError('per_example_grad takes a single feature vector')
  return per_example_grads(theta, spec, x, y)[0]


def input_grads(theta: np.ndarray, spec: ModelSpec, x, y) -> np.ndarray:
  """Gradients of each example's loss with respect to its features."""
  x = _features(x, spec)
  t = targets(y, spec.num_classes)
  logits, a = _forward(theta, spec, x)
  delta = special.softmax(logits, axis=1) - t
  if spec.hidden is None:
    w, _ = spec.unpack(theta)
    return delta @ w
  w1, _, w2, _ = spec.unpack(theta)
  return ((delta @ w2) * (1.0 - a * a)) @ w1
