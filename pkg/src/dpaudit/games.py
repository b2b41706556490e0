"""Adversary games: crafter, trainer with a secret bit, distinguisher.

A game is fully described by a :class:`GameConfig`. Each trial derives
independent random streams for the trainer, the crafter and the
distinguisher from ``(base_seed, trial_index)``, so an experiment's
outcome does not depend on execution order or on how many worker
processes run it.

Distinguishers reduce what they observe to a scalar statistic. Unless the
config fixes ``tau``, the first ``calibration_fraction`` of the trials is
used only to choose the threshold, and the remaining trials are scored with
that frozen threshold.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import logging
import math
import zlib
from typing import Callable, Optional, Sequence

import numpy as np

from dpaudit import attacks
from dpaudit import model
from dpaudit import optimizer
from dpaudit import stats
from dpaudit.datasets import Dataset

logger = logging.getLogger(__name__)

# Ordered from the weakest to the strongest adversary.
GAME_KINDS = (
    'api_access',
    'static_poison',
    'intermediate_poison',
    'adaptive_poison',
    'gradient_poison',
    'malicious_dataset',
)
OBSERVATIONS = ('final_model', 'all_params', 'released_updates')

_DEFAULT_OBSERVATION = {
    'api_access': 'final_model',
    'static_poison': 'final_model',
    'intermediate_poison': 'all_params',
    'adaptive_poison': 'all_params',
    'gradient_poison': 'all_params',
    'malicious_dataset': 'released_updates',
}

ROLES = ('bit', 'trainer', 'crafter', 'distinguisher', 'init')


def _role_code(role: str) -> int:
  return zlib.crc32(role.encode())


assert len({_role_code(r) for r in ROLES}) == len(ROLES)


def trial_seed(base_seed: int, trial_index: int) -> int:
  """64-bit seed of one trial, a pure function of its two arguments."""
  ss = np.random.SeedSequence(base_seed, spawn_key=(trial_index,))
  return int(ss.generate_state(1, np.uint64)[0])


def role_rng(seed: int, role: str) -> np.random.Generator:
  if role not in ROLES:
    raise ValueError(f'unknown role {role!r}')
  return np.random.default_rng(
      np.random.SeedSequence(seed, spawn_key=(_role_code(role),)))


@dataclasses.dataclass(frozen=True)
class GameConfig:
  """Everything needed to replay a game.

  ``data`` is the audited dataset D and ``pool`` the adversary's sample
  from the data distribution (random records, shadow training). For the
  malicious-dataset game ``data`` only supplies the input bounds.
  """

  game_kind: str
  model: model.ModelSpec
  dp: optimizer.DpConfig
  data: Dataset
  pool: Optional[Dataset] = None
  observation: Optional[str] = None
  trials: int = 100
  base_seed: int = 0
  tau: Optional[float] = None
  calibration_fraction: float = 0.5
  mode: Optional[str] = None
  target_eps: Optional[float] = None
  watermark_size: int = 16
  observation_steps: int = 10
  shadow_count: int = 8
  ascent_steps: int = 50
  input_lr: float = 0.1
  adaptive_steps: int = 50
  malicious_size: int = 100
  delta: float = 1e-5
  conf: float = 0.95

  def __post_init__(self):
    if self.game_kind not in GAME_KINDS:
      raise ValueError(f'unknown game {self.game_kind!r}')
    obs = self.observed
    if obs not in OBSERVATIONS:
      raise ValueError(f'unknown observation {obs!r}')
    kind = self.game_kind
    if kind in ('api_access', 'static_poison') and obs != 'final_model':
      raise ValueError(f'{kind} only reveals the final model')
    if kind in ('intermediate_poison', 'adaptive_poison', 'gradient_poison'):
      if obs == 'final_model':
        raise ValueError(f'{kind} needs the full training trajectory')
    if kind == 'malicious_dataset' and obs != 'released_updates':
      raise ValueError('malicious_dataset observes released updates')
    if obs == 'all_params' and kind == 'gradient_poison' and (
        self.train_dp.learning_rate == 0):
      raise ValueError('updates cannot be recovered from parameters when '
                       'the learning rate is zero; observe released_updates')
    if kind in ('api_access', 'static_poison', 'intermediate_poison',
                'adaptive_poison') and (self.pool is None or not len(self.pool)):
      raise ValueError(f'{kind} needs a nonempty pool')
    if self.trials < 1:
      raise ValueError('trials must be at least 1')
    if not 0 <= self.calibration_fraction < 1:
      raise ValueError('calibration_fraction must lie in [0, 1)')
    if self.mode not in (None, 'max', 'mean'):
      raise ValueError(f'unknown mode {self.mode!r}')

  @property
  def observed(self) -> str:
    """The observation model, defaulted per game."""
    return self.observation or _DEFAULT_OBSERVATION[self.game_kind]

  @property
  def train_dp(self) -> optimizer.DpConfig:
    """Training config; the malicious-dataset trainer never moves."""
    if self.game_kind == 'malicious_dataset':
      return self.dp.replace(learning_rate=0.0)
    return self.dp

  def replace(self, **changes) -> GameConfig:
    return dataclasses.replace(self, **changes)

  @property
  def trajectory_mode(self) -> str:
    return self.mode or attacks.auto_mode(self.target_eps)

  @property
  def direction(self) -> str:
    if self.game_kind in ('gradient_poison', 'malicious_dataset'):
      return 'above'
    return 'below'

  @property
  def num_calibration(self) -> int:
    if self.tau is not None:
      return 0
    return int(math.floor(self.calibration_fraction * self.trials))


@dataclasses.dataclass(frozen=True)
class Observation:
  """What the trainer hands the distinguisher."""

  theta0: np.ndarray
  params: Optional[list[np.ndarray]] = None
  updates: Optional[list[np.ndarray]] = None


def observe(transcript: optimizer.Transcript, observation: str,
            learning_rate: float) -> Observation:
  """Restricts a transcript to the configured observation model.

  Batch sizes are never revealed: with Poisson sampling they depend on
  the secret bit.
  """
  theta0 = transcript.params[0]
  if observation == 'final_model':
    return Observation(theta0, params=[transcript.final])
  if observation == 'all_params':
    params = list(transcript.params)
    updates = None
    if learning_rate > 0:
      updates = [(a - b) / learning_rate for a, b in zip(params, params[1:])]
    return Observation(theta0, params=params, updates=updates)
  if observation == 'released_updates':
    updates = list(transcript.released_updates)
    params = [theta0]
    for u in updates:
      params.append(params[-1] - learning_rate * u)
    return Observation(theta0, params=params, updates=updates)
  raise ValueError(f'unknown observation {observation!r}')


@dataclasses.dataclass(frozen=True)
class TrialRecord:
  trial_index: int
  seed: int
  secret_bit: int
  statistic: float
  valid: bool = True
  error: str = ''


@dataclasses.dataclass(frozen=True)
class TrialOutcome:
  trial_index: int
  seed: int
  secret_bit: int
  guess: int
  statistic: float
  calibration: bool = False


class _AdaptiveHook(optimizer.TrainingHook):

  def __init__(self, cfg: GameConfig, query, bounds):
    self.cfg = cfg
    self.query = query
    self.bounds = bounds

  def dataset(self, step, transcript, dataset):
    x, y = attacks.craft_adaptive_poison(
        transcript.params[-1], self.cfg.model, self.query,
        self.cfg.adaptive_steps, self.cfg.input_lr,
        self.cfg.train_dp.learning_rate,
        self.bounds)
    return dataset.with_example(x, y)


class _WatermarkHook(optimizer.TrainingHook):
  """Adds the watermark gradient once the observation window has passed."""

  def __init__(self, cfg: GameConfig):
    self.cfg = cfg
    self.gradient = None

  def extra_gradient(self, step, transcript):
    cfg = self.cfg
    if step <= cfg.observation_steps:
      return None
    if self.gradient is None:
      view = observe(transcript, cfg.observed, cfg.train_dp.learning_rate)
      _, self.gradient = attacks.craft_gradient_watermark(
          view.updates, cfg.model.num_params, cfg.dp.clip_norm,
          cfg.watermark_size, cfg.observation_steps)
    return self.gradient


def watermark_model(cfg: GameConfig, dataset_size: int) -> attacks.WatermarkModel:
  dp = cfg.train_dp
  return attacks.WatermarkModel(
      dp.sampling_rate, dp.noise_multiplier, dp.clip_norm, cfg.watermark_size,
      dataset_size=dataset_size)


Distinguisher = Callable[[Observation, dict, np.random.Generator], float]


def play_trial(cfg: GameConfig, trial_index: int,
               distinguisher: Optional[Distinguisher] = None) -> TrialRecord:
  """Runs crafter, trainer and distinguisher; returns the raw statistic.

  ``distinguisher`` replaces the game's own; it receives the observation,
  a context dict (pair, query, plan, ...) and its own generator, and its
  return value is used as the statistic.
  """
  seed = trial_seed(cfg.base_seed, trial_index)
  bit = int(role_rng(seed, 'bit').integers(2))
  try:
    stat = _play(cfg, seed, bit, distinguisher)
    if not np.isfinite(stat) and not np.isinf(stat):
      raise FloatingPointError('statistic is NaN')
  except (FloatingPointError, ArithmeticError, np.linalg.LinAlgError) as e:
    logger.warning('trial %d invalid: %s', trial_index, e)
    return TrialRecord(trial_index, seed, bit, math.nan, False, str(e))
  return TrialRecord(trial_index, seed, bit, float(stat))


def _play(cfg: GameConfig, seed: int, bit: int, distinguisher) -> float:
  rng_c = role_rng(seed, 'crafter')
  rng_t = role_rng(seed, 'trainer')
  rng_d = role_rng(seed, 'distinguisher')
  init_seed = int(role_rng(seed, 'init').integers(2**63))
  spec, dp, kind = cfg.model, cfg.train_dp, cfg.game_kind
  theta0 = model.init_model(spec, init_seed)
  dp = dp.replace(seed=init_seed)
  ctx = {}

  if kind == 'api_access':
    pair = attacks.craft_random_pair(cfg.data, cfg.pool, rng_c)
    ctx.update(pair=pair, query=pair.query)
    transcript = optimizer.train(spec, pair.choose(bit), dp, theta0=theta0,
                                 rng=rng_t)
  elif kind in ('static_poison', 'intermediate_poison'):
    pair = attacks.craft_static_poison(
        cfg.data, cfg.pool, spec, dp, rng_c, cfg.shadow_count,
        cfg.ascent_steps, cfg.input_lr)
    ctx.update(pair=pair, query=pair.query)
    transcript = optimizer.train(spec, pair.choose(bit), dp, theta0=theta0,
                                 rng=rng_t)
  elif kind == 'adaptive_poison':
    qpair = attacks.craft_static_poison(
        cfg.data, cfg.pool, spec, dp, rng_c, cfg.shadow_count,
        cfg.ascent_steps, cfg.input_lr)
    query = qpair.query
    ctx.update(query=query)
    hook = _AdaptiveHook(cfg, query, cfg.data.bounds) if bit else None
    transcript = optimizer.train(spec, cfg.data, dp, hook=hook, theta0=theta0,
                                 rng=rng_t)
  else:
    if kind == 'malicious_dataset':
      data = attacks.craft_malicious_dataset(theta0, spec, cfg.malicious_size,
                                             rng_c, cfg.data.bounds)
    else:
      data = cfg.data
    ctx.update(dataset=data)
    hook = _WatermarkHook(cfg) if bit else optimizer.TrainingHook()
    transcript = optimizer.train(spec, data, dp, hook=hook, theta0=theta0,
                                 rng=rng_t)

  view = observe(transcript, cfg.observed, dp.learning_rate)
  if distinguisher is not None:
    return float(distinguisher(view, ctx, rng_d))

  if kind in ('api_access', 'static_poison'):
    return model.loss(view.params[-1], spec, *ctx['query'])
  if kind in ('intermediate_poison', 'adaptive_poison'):
    models = view.params[1:] or view.params
    return attacks.trajectory_statistic(models, spec, ctx['query'],
                                        cfg.trajectory_mode)
  plan, _ = attacks.craft_gradient_watermark(
      view.updates, spec.num_params, dp.clip_norm, cfg.watermark_size,
      cfg.observation_steps)
  wm = watermark_model(cfg, len(ctx['dataset']))
  return attacks.watermark_evidence(view.updates, plan, wm)


def _play_star(args):
  return play_trial(*args)


def play_trials(cfg: GameConfig, indices: Sequence[int], parallelism: int = 1,
                distinguisher: Optional[Distinguisher] = None
                ) -> list[TrialRecord]:
  jobs = [(cfg, i, distinguisher) for i in indices]
  if parallelism <= 1:
    return [_play_star(j) for j in jobs]
  with concurrent.futures.ProcessPoolExecutor(parallelism) as pool:
    return list(pool.map(_play_star, jobs, chunksize=8))


def run_trial(cfg: GameConfig, trial_index: int,
              threshold: Optional[stats.Threshold] = None,
              distinguisher: Optional[Distinguisher] = None) -> TrialOutcome:
  """One trial scored with ``threshold`` (default: the config's ``tau``).

  A custom ``distinguisher`` returns its guess directly.
  """
  rec = play_trial(cfg, trial_index, distinguisher)
  if not rec.valid:
    raise FloatingPointError(rec.error)
  if distinguisher is not None:
    guess = int(rec.statistic)
  else:
    threshold = threshold or fixed_threshold(cfg)
    guess = int(threshold.guess(rec.statistic))
  return TrialOutcome(trial_index, rec.seed, rec.secret_bit, guess,
                      rec.statistic)


def fixed_threshold(cfg: GameConfig) -> stats.Threshold:
  if cfg.tau is None:
    raise ValueError('no tau configured; use run_experiment to calibrate')
  if cfg.direction == 'above':
    # The watermark test compares evidence against log(tau).
    t = math.log(cfg.tau) if cfg.tau > 0 else -np.inf
    return stats.Threshold(t, 'above')
  strict = cfg.game_kind in ('intermediate_poison', 'adaptive_poison')
  return stats.Threshold(cfg.tau, 'below', strict=strict)


@dataclasses.dataclass(frozen=True)
class ExperimentResult:
  config: GameConfig
  outcomes: list[TrialOutcome]
  threshold: Optional[stats.Threshold]
  counts: stats.Counts
  audit: stats.AuditResult
  invalid: list[int]


def run_experiment(cfg: GameConfig, parallelism: int = 1,
                   distinguisher: Optional[Distinguisher] = None
                   ) -> ExperimentResult:
  """Plays every trial, freezes the threshold, scores the evaluation trials.

  Invalid trials are excluded from the counts and listed separately.
  """
  records = play_trials(cfg, range(cfg.trials), parallelism, distinguisher)
  invalid = [r.trial_index for r in records if not r.valid]
  valid = [r for r in records if r.valid]
  n_cal = 0 if distinguisher is not None else cfg.num_calibration
  calib = [r for r in valid if r.trial_index < n_cal]
  if distinguisher is not None:
    threshold = None
    guesses = [int(r.statistic) for r in valid]
  else:
    if cfg.tau is not None:
      threshold = fixed_threshold(cfg)
    else:
      if not calib:
        raise ValueError('no valid calibration trials; increase trials or '
                         'set tau')
      threshold = stats.select_threshold(
          [r.statistic for r in calib], [r.secret_bit for r in calib],
          cfg.delta, cfg.direction, cfg.conf)
      if cfg.game_kind in ('intermediate_poison', 'adaptive_poison'):
        threshold = dataclasses.replace(threshold, strict=True)
    guesses = [int(g) for g in threshold.guess([r.statistic for r in valid])]
  outcomes = [
      TrialOutcome(r.trial_index, r.seed, r.secret_bit, g, r.statistic,
                   r.trial_index < n_cal)
      for r, g in zip(valid, guesses)
  ]
  scored = [o for o in outcomes if not o.calibration]
  counts = stats.Counts.from_outcomes([o.secret_bit for o in scored],
                                      [o.guess for o in scored],
                                      invalid=len(invalid))
  return ExperimentResult(cfg, outcomes, threshold, counts,
                          stats.audit(counts, cfg.delta, cfg.conf), invalid)


# ------------------------------------------------------------ analytic game


@dataclasses.dataclass(frozen=True)
class AnalyticResult:
  audit: stats.AuditResult
  threshold: stats.Threshold
  bits: np.ndarray
  evidence: np.ndarray
  num_calibration: int

  @property
  def guesses(self) -> np.ndarray:
    return self.threshold.guess(self.evidence)


def analytic_llr(bits: np.ndarray, q: float, noise_multiplier: float,
                 clip_norm: float, steps: int, size: int,
                 noise_rng: np.random.Generator,
                 coin_rng: np.random.Generator) -> np.ndarray:
  """Accumulated watermark evidence for a batch of simulated trials.

  Only the signed sum over the watermark coordinates is simulated: it is
  Gaussian noise plus, when the bit is set, the watermark with
  probability ``q`` per step. Noise and participation coins come from
  separate generators, so splitting the trials into batches does not
  change the result.
  """
  wm = attacks.WatermarkModel(q, noise_multiplier, clip_norm, size)
  n = len(bits)
  d = noise_rng.standard_normal((n, steps))
  d *= wm.std
  hit = coin_rng.random((n, steps)) < q
  hit &= np.asarray(bits, dtype=bool)[:, None]
  d += wm.mean * hit
  return wm.step_llr(d).sum(axis=1)


def analytic_game(q: float, noise_multiplier: float, clip_norm: float,
                  steps: int, size: int, trials: int, delta: float = 1e-5,
                  conf: float = 0.95, seed: int = 0,
                  calibration_fraction: float = 0.5,
                  block: int = 2_000_000) -> AnalyticResult:
  """Malicious-dataset game reduced to the watermark coordinates.

  No model is trained. The first ``calibration_fraction`` of trials picks
  the evidence threshold; the rest are scored.
  """
  if trials < 2:
    raise ValueError('need at least two trials')
  ss = np.random.SeedSequence(seed)
  bit_ss, noise_ss, coin_ss = ss.spawn(3)
  bits = np.random.default_rng(bit_ss).integers(0, 2, trials).astype(bool)
  noise_rng = np.random.default_rng(noise_ss)
  coin_rng = np.random.default_rng(coin_ss)
  rows = max(1, block // max(steps, 1))
  evidence = np.empty(trials)
  for start in range(0, trials, rows):
    stop = min(trials, start + rows)
    evidence[start:stop] = analytic_llr(bits[start:stop], q, noise_multiplier,
                                        clip_norm, steps, size, noise_rng,
                                        coin_rng)
  n_cal = int(math.floor(calibration_fraction * trials))
  threshold = stats.select_threshold(evidence[:n_cal], bits[:n_cal], delta,
                                     'above', conf)
  guesses = threshold.guess(evidence[n_cal:])
  counts = stats.Counts.from_outcomes(bits[n_cal:], guesses)
  return AnalyticResult(stats.audit(counts, delta, conf), threshold, bits,
                        evidence, n_cal)
