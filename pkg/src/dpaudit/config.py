"""Experiment configuration files.

An experiment is described by one TOML file. Unknown keys are rejected and
every validation error names the offending field path, e.g.
``privacy.sampling_rate``. Example::

    game = "malicious_dataset"
    trials = 1000
    seed = 7

    [privacy]
    sampling_rate = 0.1
    steps = 50
    target_epsilon = 2.0      # or noise_multiplier = 1.1, never both

    [data]
    source = "synthetic"
    size = 50

``game = "analytic"`` runs the model-free watermark simulation and only
reads the ``privacy`` and ``attack.watermark_size`` settings.
"""

from __future__ import annotations

import sys
from typing import Literal, Optional

import numpy as np
import pydantic

if sys.version_info >= (3, 11):
  import tomllib
else:
  import tomli as tomllib

from dpaudit import accountant
from dpaudit import datasets
from dpaudit import games
from dpaudit import model
from dpaudit import optimizer


class ConfigError(ValueError):
  """A configuration file is unreadable or violates the schema."""


class _Strict(pydantic.BaseModel):
  model_config = pydantic.ConfigDict(extra='forbid', frozen=True)


class PrivacySection(_Strict):
  sampling_rate: float = pydantic.Field(0.1, ge=0, le=1)
  steps: Optional[int] = pydantic.Field(None, ge=0)
  epochs: Optional[float] = pydantic.Field(None, gt=0)
  noise_multiplier: Optional[float] = pydantic.Field(None, ge=0)
  target_epsilon: Optional[float] = pydantic.Field(None, gt=0)
  accountant: Literal['rdp', 'gdp'] = 'rdp'
  clip_norm: float = pydantic.Field(1.0, gt=0)
  learning_rate: float = pydantic.Field(0.5, ge=0)

  @pydantic.model_validator(mode='after')
  def _exactly_one(self):
    if (self.noise_multiplier is None) == (self.target_epsilon is None):
      raise ValueError(
          'give exactly one of noise_multiplier and target_epsilon')
    if self.steps is not None and self.epochs is not None:
      raise ValueError('give at most one of steps and epochs')
    return self

  @property
  def num_steps(self) -> int:
    if self.steps is not None:
      return self.steps
    if self.epochs is not None:
      if self.sampling_rate == 0:
        raise ValueError('epochs need a positive sampling_rate')
      return accountant.steps_from_epochs(self.epochs, self.sampling_rate)
    return 50


class ModelSection(_Strict):
  architecture: Literal['logistic', 'mlp'] = 'logistic'
  hidden: int = pydantic.Field(16, gt=0)


class DataSection(_Strict):
  source: Literal['synthetic', 'binary_records', 'idx'] = 'synthetic'
  size: int = pydantic.Field(50, ge=0)
  pool_size: int = pydantic.Field(200, ge=0)
  feature_dim: int = pydantic.Field(10, gt=0)
  num_classes: int = pydantic.Field(2, ge=2)
  separation: float = pydantic.Field(4.0, ge=0)
  seed: int = 0
  images: Optional[str] = None
  labels: Optional[str] = None

  @pydantic.model_validator(mode='after')
  def _idx_paths(self):
    if self.source == 'idx' and not (self.images and self.labels):
      raise ValueError('idx source needs both images and labels paths')
    return self


class AttackSection(_Strict):
  observation: Optional[Literal['final_model', 'all_params',
                                'released_updates']] = None
  tau: Optional[float] = None
  calibration_fraction: float = pydantic.Field(0.5, ge=0, lt=1)
  mode: Optional[Literal['max', 'mean']] = None
  watermark_size: int = pydantic.Field(16, gt=0)
  observation_steps: int = pydantic.Field(10, ge=0)
  shadow_count: int = pydantic.Field(8, gt=0)
  ascent_steps: int = pydantic.Field(50, ge=0)
  input_lr: float = pydantic.Field(0.1, ge=0)
  adaptive_steps: int = pydantic.Field(50, ge=0)
  malicious_size: int = pydantic.Field(100, gt=0)

  @pydantic.field_validator('watermark_size')
  @classmethod
  def _even(cls, v):
    if v % 2:
      raise ValueError('watermark_size must be even')
    return v


class ExperimentConfig(_Strict):
  game: Literal[games.GAME_KINDS + ('analytic',)]
  trials: int = pydantic.Field(100, ge=1)
  seed: int = 0
  parallelism: int = pydantic.Field(1, ge=1)
  delta: float = pydantic.Field(1e-5, gt=0, lt=1)
  conf: float = pydantic.Field(0.95, gt=0, lt=1)
  out: Optional[str] = None
  privacy: PrivacySection = PrivacySection(target_epsilon=2.0)
  model: ModelSection = ModelSection()
  data: DataSection = DataSection()
  attack: AttackSection = AttackSection()

  def noise_multiplier(self) -> float:
    """The configured or accountant-calibrated noise multiplier.

    Raises:
      accountant.CalibrationError: If the target epsilon is unreachable.
    """
    p = self.privacy
    if p.noise_multiplier is not None:
      return p.noise_multiplier
    return accountant.calibrate_sigma(p.target_epsilon, p.sampling_rate,
                                      p.num_steps, self.delta, p.accountant)

  def target_epsilon(self) -> Optional[float]:
    return self.privacy.target_epsilon


def _format_errors(err: pydantic.ValidationError) -> str:
  lines = []
  for e in err.errors():
    path = '.'.join(str(p) for p in e['loc']) or '<root>'
    lines.append(f'{path}: {e["msg"]}')
  return '\n'.join(lines)


def parse(raw: dict) -> ExperimentConfig:
  try:
    return ExperimentConfig.model_validate(raw)
  except pydantic.ValidationError as e:
    raise ConfigError(_format_errors(e)) from None


def load(path) -> ExperimentConfig:
  try:
    with open(path, 'rb') as f:
      raw = tomllib.load(f)
  except OSError as e:
    raise ConfigError(f'cannot read {path}: {e}') from None
  except tomllib.TOMLDecodeError as e:
    raise ConfigError(f'{path}: {e}') from None
  return parse(raw)


def build_datasets(cfg: ExperimentConfig):
  """Returns ``(data, pool)`` drawn from disjoint records of the source."""
  d = cfg.data
  n = d.size + d.pool_size
  if d.source == 'synthetic':
    full = datasets.gen_synthetic(d.num_classes, d.feature_dim, max(n, 1),
                                  d.separation, d.seed)
  elif d.source == 'binary_records':
    full = datasets.gen_binary_records(max(n, 10), d.seed)
  else:
    full = datasets.load_idx(d.images, d.labels)
  if len(full) < n:
    raise ConfigError(f'data: source has {len(full)} records, need {n}')
  idx = np.random.default_rng(d.seed).permutation(len(full))
  return full.subset(idx[:d.size]), full.subset(idx[d.size:n])


def model_spec(cfg: ExperimentConfig, data) -> model.ModelSpec:
  if cfg.model.architecture == 'logistic':
    return model.ModelSpec.logistic(data.feature_dim, data.num_classes)
  return model.ModelSpec.mlp(data.feature_dim, cfg.model.hidden,
                             data.num_classes)


def game_config(cfg: ExperimentConfig, noise_multiplier: float
                ) -> games.GameConfig:
  if cfg.game == 'analytic':
    raise ConfigError('game: the analytic game has no GameConfig')
  data, pool = build_datasets(cfg)
  p, a = cfg.privacy, cfg.attack
  dp = optimizer.DpConfig(
      clip_norm=p.clip_norm, noise_multiplier=noise_multiplier,
      learning_rate=p.learning_rate, sampling_rate=p.sampling_rate,
      steps=p.num_steps, seed=cfg.seed)
  try:
    return games.GameConfig(
        game_kind=cfg.game, model=model_spec(cfg, data), dp=dp, data=data,
        pool=pool, observation=a.observation, trials=cfg.trials,
        base_seed=cfg.seed, tau=a.tau,
        calibration_fraction=a.calibration_fraction, mode=a.mode,
        target_eps=p.target_epsilon, watermark_size=a.watermark_size,
        observation_steps=a.observation_steps, shadow_count=a.shadow_count,
        ascent_steps=a.ascent_steps, input_lr=a.input_lr,
        adaptive_steps=a.adaptive_steps, malicious_size=a.malicious_size,
        delta=cfg.delta, conf=cfg.conf)
  except ValueError as e:
    raise ConfigError(f'game: {e}') from None

