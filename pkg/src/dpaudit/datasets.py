"""Datasets: IDX image files and synthetic generators.

The IDX format (used by MNIST) is big-endian. Image files start with the
magic number ``0x00000803`` followed by ``count, rows, cols`` as 32-bit
unsigned integers and then ``count * rows * cols`` unsigned bytes. Label
files start with ``0x00000801``, then ``count`` and one byte per label.
"""

from __future__ import annotations

import dataclasses
import os
import struct

import numpy as np

from dpaudit import model

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class IdxError(ValueError):
  """Base class for IDX parsing failures."""


class BadMagicError(IdxError):
  pass


class TruncatedFileError(IdxError):
  pass


class CountMismatchError(IdxError):
  pass


@dataclasses.dataclass(frozen=True, eq=False)
class Dataset:
  """Feature matrix plus target matrix.

  ``targets`` always has shape ``(n, k)``; hard labels are stored one-hot.
  ``bounds`` holds per-feature ``(lo, hi)`` arrays.
  """

  features: np.ndarray
  targets: np.ndarray
  bounds: tuple[np.ndarray, np.ndarray]

  def __post_init__(self):
    x = np.asarray(self.features, dtype=np.float64)
    if x.ndim != 2:
      x = x.reshape(len(x), -1)
    t = np.asarray(self.targets, dtype=np.float64)
    if t.ndim != 2 or t.shape[0] != x.shape[0]:
      raise ValueError('targets must be (n, k) and match the features')
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), x.shape[1:])
              for b in self.bounds)
    if x.size and (np.any(x < lo) or np.any(x > hi)):
      raise ValueError('features outside the declared input bounds')
    object.__setattr__(self, 'features', x)
    object.__setattr__(self, 'targets', t)
    object.__setattr__(self, 'bounds', (lo, hi))

  @classmethod
  def from_labels(cls, features, labels, num_classes: int,
                  bounds=(0.0, 1.0)) -> Dataset:
    x = np.asarray(features, dtype=np.float64)
    x = x.reshape(len(x), -1)
    if len(x) == 0:
      t = np.zeros((0, num_classes))
    else:
      t = model.targets(labels, num_classes)
    return cls(x, t, bounds)

  @classmethod
  def empty(cls, feature_dim: int, num_classes: int, bounds=(0.0, 1.0)):
    return cls(np.zeros((0, feature_dim)), np.zeros((0, num_classes)), bounds)

  def __len__(self) -> int:
    return self.features.shape[0]

  def __eq__(self, other) -> bool:
    if not isinstance(other, Dataset):
      return NotImplemented
    return (np.array_equal(self.features, other.features)
            and np.array_equal(self.targets, other.targets)
            and all(np.array_equal(a, b)
                    for a, b in zip(self.bounds, other.bounds)))

  @property
  def feature_dim(self) -> int:
    return self.features.shape[1]

  @property
  def num_classes(self) -> int:
    return self.targets.shape[1]

  @property
  def labels(self) -> np.ndarray:
    """Hard labels (argmax of the targets)."""
    return np.argmax(self.targets, axis=1)

  def example(self, i: int) -> tuple[np.ndarray, np.ndarray]:
    return self.features[i].copy(), self.targets[i].copy()

  def subset(self, idx) -> Dataset:
    idx = np.asarray(idx, dtype=np.int64)
    return Dataset(self.features[idx], self.targets[idx], self.bounds)

  def with_example(self, x, y) -> Dataset:
    """Returns a new dataset with ``(x, y)`` appended."""
    t = model.targets(y, self.num_classes)
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    return Dataset(np.vstack([self.features, x]),
                   np.vstack([self.targets, t]), self.bounds)

  def clamp(self, x) -> np.ndarray:
    return np.clip(x, self.bounds[0], self.bounds[1])


def _read_exact(f, n: int, what: str) -> bytes:
  buf = f.read(n)
  if len(buf) != n:
    raise TruncatedFileError(
        f'{what}: expected {n} bytes, found {len(buf)}')
  return buf


def read_idx_images(path: str | os.PathLike) -> np.ndarray:
  """Reads an IDX image file into a ``uint8`` array ``(count, rows, cols)``."""
  with open(path, 'rb') as f:
    magic, = struct.unpack('>I', _read_exact(f, 4, 'image header'))
    if magic != IMAGE_MAGIC:
      raise BadMagicError(
          f'{path}: bad image magic 0x{magic:08x}, expected '
          f'0x{IMAGE_MAGIC:08x}')
    count, rows, cols = struct.unpack('>III', _read_exact(f, 12, 'image dims'))
    payload = _read_exact(f, count * rows * cols, f'{path} pixels')
  return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def read_idx_labels(path: str | os.PathLike) -> np.ndarray:
  with open(path, 'rb') as f:
    magic, = struct.unpack('>I', _read_exact(f, 4, 'label header'))
    if magic != LABEL_MAGIC:
      raise BadMagicError(
          f'{path}: bad label magic 0x{magic:08x}, expected '
          f'0x{LABEL_MAGIC:08x}')
    count, = struct.unpack('>I', _read_exact(f, 4, 'label count'))
    payload = _read_exact(f, count, f'{path} labels')
  return np.frombuffer(payload, dtype=np.uint8)


def load_idx(images_path, labels_path, num_classes: int | None = None):
  """Loads an IDX image/label pair as a flattened dataset in ``[0, 1]``.

  Args:
    images_path: Path to the image file.
    labels_path: Path to the label file.
    num_classes: Class count; defaults to ``max(label) + 1`` (10 for MNIST
      once all digits are present).

  Raises:
    BadMagicError, TruncatedFileError, CountMismatchError.
  """
  images = read_idx_images(images_path)
  labels = read_idx_labels(labels_path)
  if len(images) != len(labels):
    raise CountMismatchError(
        f'{len(images)} images but {len(labels)} labels')
  if num_classes is None:
    num_classes = int(labels.max()) + 1 if len(labels) else 1
  x = images.reshape(len(images), -1).astype(np.float64) / 255.0
  return Dataset.from_labels(x, labels.astype(np.int64), num_classes)


def write_idx(images_path, labels_path, images: np.ndarray,
              labels: np.ndarray) -> None:
  """Writes ``uint8`` images ``(count, rows, cols)`` and labels as IDX."""
  images = np.asarray(images)
  labels = np.asarray(labels)
  if images.dtype != np.uint8 or labels.dtype != np.uint8:
    raise TypeError('IDX payloads must be uint8')
  count, rows, cols = images.shape
  with open(images_path, 'wb') as f:
    f.write(struct.pack('>IIII', IMAGE_MAGIC, count, rows, cols))
    f.write(images.tobytes())
  with open(labels_path, 'wb') as f:
    f.write(struct.pack('>II', LABEL_MAGIC, len(labels)))
    f.write(labels.tobytes())


def save_idx(dataset: Dataset, images_path, labels_path,
             shape: tuple[int, int] | None = None) -> None:
  """Writes a dataset whose features are multiples of 1/255 in ``[0, 1]``.

  ``shape`` is the ``(rows, cols)`` image shape; by default a single row.

  Raises:
    ValueError: If a feature is not exactly representable as a byte.
  """
  x = dataset.features * 255.0
  pixels = np.rint(x)
  if np.any(pixels < 0) or np.any(pixels > 255) or not np.allclose(
      pixels, x, rtol=0, atol=1e-9):
    raise ValueError('features must be multiples of 1/255 in [0, 1]')
  labels = dataset.labels
  if dataset.num_classes > 256:
    raise ValueError('IDX labels are single bytes')
  rows, cols = shape or (1, dataset.feature_dim)
  write_idx(images_path, labels_path,
            pixels.astype(np.uint8).reshape(len(dataset), rows, cols),
            labels.astype(np.uint8))


def gen_synthetic(k: int, d: int, n: int, separation: float,
                  seed: int) -> Dataset:
  """Gaussian-mixture classification task.

  Class means are ``separation / 2`` times independent random unit vectors,
  so the expected distance between two means is about ``separation / sqrt(2)``
  in high dimension and exactly ``separation`` when ``k = 2`` (the two means
  are antipodal). Points have unit isotropic noise. Labels cycle
  ``0, 1, ..., k-1`` so class counts differ by at most one. Features are
  unbounded in principle; the declared bounds are the observed range
  padded by one unit.
  """
  if k < 1 or d < 1:
    raise ValueError('k and d must be positive')
  if n < k:
    raise ValueError(f'need n >= k, got n={n}, k={k}')
  rng = np.random.default_rng(seed)
  if k == 2:
    u = rng.normal(size=d)
    u /= np.linalg.norm(u)
    means = np.stack([u, -u]) * separation / 2
  else:
    means = rng.normal(size=(k, d))
    means /= np.linalg.norm(means, axis=1, keepdims=True)
    means *= separation / 2
  labels = np.arange(n) % k
  x = means[labels] + rng.normal(size=(n, d))
  bound = float(np.ceil(np.abs(x).max())) + 1.0
  return Dataset.from_labels(x, labels, k, bounds=(-bound, bound))


def gen_binary_records(n: int, seed: int, num_features: int = 600,
                       num_classes: int = 10) -> Dataset:
  """Binary purchase-style records clustered into classes.

  Each class has a prototype of per-item purchase probabilities; a record
  flips a coin per item with its class's probabilities. Shape matches the
  retail dataset used in membership-inference work (600 items, 10 classes).
  """
  if n < num_classes:
    raise ValueError(f'need n >= {num_classes}, got {n}')
  rng = np.random.default_rng(seed)
  base = rng.beta(0.5, 4.0, size=num_features)
  protos = np.clip(
      base * rng.uniform(0.2, 3.0, size=(num_classes, num_features)), 0, 0.9)
  labels = np.arange(n) % num_classes
  rng.shuffle(labels)
  x = (rng.random((n, num_features)) < protos[labels]).astype(np.float64)
  return Dataset.from_labels(x, labels, num_classes, bounds=(0.0, 1.0))
