"""Command line entry point: ``dpaudit calibrate | audit | report``.

Exit codes: 0 success, 2 configuration error, 3 runtime failure,
4 unreachable calibration target.
"""

from __future__ import annotations

import argparse
import csv
import glob
import io
import json
import logging
import os
import sys
import time
from typing import Optional, Sequence

from dpaudit import accountant
from dpaudit import config
from dpaudit import games

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3
EXIT_CALIBRATION = 4

TRIALS_FILE = 'trials.jsonl'
SUMMARY_FILE = 'summary.json'

REPORT_COLUMNS = ('game_kind', 'eps_theory_rdp', 'eps_theory_gdp', 'eps_lower',
                  'eps_empirical', 'eps_upper', 'fp', 'fn', 'fp_high',
                  'fn_high', 'delta', 'conf', 'trials')

_LADDER = {g: i for i, g in enumerate(games.GAME_KINDS + ('analytic',))}


class _Failure(Exception):

  def __init__(self, code: int, message: str):
    super().__init__(message)
    self.code = code


def _theory(q: float, sigma: float, steps: int, delta: float) -> dict:
  spec = accountant.PrivacySpec(q, sigma, steps, delta)
  return {'eps_theory_rdp': accountant.rdp_eps(spec),
          'eps_theory_gdp': accountant.gdp_eps(spec)}


def _dumps(obj) -> str:
  return json.dumps(obj, sort_keys=True, separators=(',', ':'))


# ---------------------------------------------------------------- calibrate


def _calibration_inputs(args):
  """``(eps, q, steps, delta, method)`` from flags over an optional config."""
  eps, q, delta = args.epsilon, args.sampling_rate, args.delta
  steps, method = args.steps, args.method
  cfg = config.load(args.config) if args.config else None
  if cfg is not None:
    eps = cfg.privacy.target_epsilon if eps is None else eps
    q = cfg.privacy.sampling_rate if q is None else q
    delta = cfg.delta if delta is None else delta
    method = method or cfg.privacy.accountant
  if steps is None and args.epochs is not None and q is not None:
    steps = accountant.steps_from_epochs(args.epochs, q)
  if steps is None and cfg is not None:
    steps = cfg.privacy.num_steps
  if eps is None or q is None or steps is None:
    raise _Failure(EXIT_CONFIG, 'give --config or --epsilon, --sampling-rate '
                   'and one of --steps, --epochs')
  return eps, q, steps, 1e-5 if delta is None else delta, method or 'rdp'


def cmd_calibrate(args) -> int:
  eps, q, steps, delta, method = _calibration_inputs(args)
  try:
    sigma = accountant.calibrate_sigma(eps, q, steps, delta, method)
  except accountant.CalibrationError as e:
    raise _Failure(EXIT_CALIBRATION, f'calibration failed: {e}') from None
  th = _theory(q, sigma, steps, delta)
  print(f'noise_multiplier = {sigma:.6f}')
  print(f'steps = {steps}')
  print(f'eps_rdp = {th["eps_theory_rdp"]:.6f}')
  print(f'eps_gdp = {th["eps_theory_gdp"]:.6f}')
  return EXIT_OK


# -------------------------------------------------------------------- audit


def _load_config(args) -> config.ExperimentConfig:
  cfg = config.load(args.config)
  overrides = {}
  if args.trials is not None:
    overrides['trials'] = args.trials
  if args.seed is not None:
    overrides['seed'] = args.seed
  if args.parallelism is not None:
    overrides['parallelism'] = args.parallelism
  if args.out is not None:
    overrides['out'] = args.out
  if overrides:
    cfg = config.parse({**cfg.model_dump(exclude_none=True), **overrides})
  return cfg


def _trial_lines(cfg, sigma):
  """Runs the configured game; returns (trial record lines, AuditResult)."""
  if cfg.game == 'analytic':
    p = cfg.privacy
    res = games.analytic_game(
        p.sampling_rate, sigma, p.clip_norm, p.num_steps,
        cfg.attack.watermark_size, cfg.trials, cfg.delta, cfg.conf,
        seed=cfg.seed, calibration_fraction=cfg.attack.calibration_fraction)
    guesses = res.guesses
    lines = [
        _dumps({'trial_index': i, 'secret_bit': int(res.bits[i]),
                'guess': int(guesses[i]), 'statistic': float(res.evidence[i]),
                'seed': cfg.seed, 'calibration': i < res.num_calibration})
        for i in range(cfg.trials)
    ]
    return lines, res.audit
  gcfg = config.game_config(cfg, sigma)
  res = games.run_experiment(gcfg, cfg.parallelism)
  lines = [
      _dumps({'trial_index': o.trial_index, 'secret_bit': o.secret_bit,
              'guess': o.guess, 'statistic': o.statistic, 'seed': o.seed,
              'calibration': o.calibration})
      for o in res.outcomes
  ]
  lines += [_dumps({'trial_index': i, 'invalid': True}) for i in res.invalid]
  return lines, res.audit


def cmd_audit(args) -> int:
  cfg = _load_config(args)
  out = cfg.out or 'results'
  try:
    sigma = cfg.noise_multiplier()
  except accountant.CalibrationError as e:
    raise _Failure(EXIT_CALIBRATION, f'calibration failed: {e}') from None
  start = time.perf_counter()
  lines, result = _trial_lines(cfg, sigma)
  wall = time.perf_counter() - start
  p = cfg.privacy
  steps = p.num_steps
  c = result.counts
  summary = {
      'game_kind': cfg.game,
      **_theory(p.sampling_rate, sigma, steps, cfg.delta),
      'noise_multiplier': sigma,
      'sampling_rate': p.sampling_rate,
      'steps': steps,
      'target_epsilon': p.target_epsilon,
      'trials': cfg.trials,
      'seed': cfg.seed,
      'tp': c.tp, 'tn': c.tn, 'fp': c.fp, 'fn': c.fn, 'invalid': c.invalid,
      'fp_rate': result.fp_rate, 'fn_rate': result.fn_rate,
      'fp_high': result.fp_high, 'fn_high': result.fn_high,
      'eps_empirical': result.eps_empirical,
      'eps_lower': result.eps_lower,
      'eps_upper': result.eps_upper,
      'delta': cfg.delta,
      'conf': cfg.conf,
      'wall_time': wall,
  }
  os.makedirs(out, exist_ok=True)
  with open(os.path.join(out, TRIALS_FILE), 'w') as f:
    for line in lines:
      f.write(line + '\n')
  with open(os.path.join(out, SUMMARY_FILE), 'w') as f:
    f.write(_dumps(summary) + '\n')
  print(f'{cfg.game}: eps_lower = {result.eps_lower:.4f} '
        f'(eps_rdp = {summary["eps_theory_rdp"]:.4f}, '
        f'eps_gdp = {summary["eps_theory_gdp"]:.4f}) -> {out}')
  return EXIT_OK


# ------------------------------------------------------------------- report


def load_summaries(patterns: Sequence[str]) -> list[dict]:
  paths = []
  for pat in patterns:
    if os.path.isdir(pat):
      pat = os.path.join(pat, SUMMARY_FILE)
    paths.extend(sorted(glob.glob(pat)))
  rows = []
  for path in dict.fromkeys(paths):
    with open(path) as f:
      for line in f:
        if line.strip():
          rows.append(json.loads(line))
  return rows


def order_rows(rows: list[dict]) -> list[dict]:
  """Sorts by the adversary ladder; stable within a game."""
  return sorted(rows, key=lambda r: _LADDER.get(r['game_kind'], len(_LADDER)))


def report_csv(rows: list[dict]) -> str:
  buf = io.StringIO()
  w = csv.DictWriter(buf, REPORT_COLUMNS, extrasaction='ignore',
                     lineterminator='\n')
  w.writeheader()
  for r in rows:
    w.writerow({k: repr(r[k]) if isinstance(r[k], float) else r[k]
                for k in REPORT_COLUMNS})
  return buf.getvalue()


def report_text(rows: list[dict]) -> str:
  head = (f'{"game":<20} {"eps_rdp":>8} {"eps_gdp":>8} {"eps_lower":>9} '
          f'{"interval":>18} {"trials":>8}')
  lines = [head, '-' * len(head)]
  for r in rows:
    interval = f'[{r["eps_lower"]:.3f}, {r["eps_upper"]:.3f}]'
    lines.append(
        f'{r["game_kind"]:<20} {r["eps_theory_rdp"]:>8.3f} '
        f'{r["eps_theory_gdp"]:>8.3f} {r["eps_lower"]:>9.3f} '
        f'{interval:>18} {r["trials"]:>8}')
  return '\n'.join(lines)


def cmd_report(args) -> int:
  rows = order_rows(load_summaries(args.results))
  if not rows:
    raise _Failure(EXIT_CONFIG, 'no summary records matched')
  print(report_text(rows))
  text = report_csv(rows)
  if args.out:
    with open(args.out, 'w') as f:
      f.write(text)
  else:
    print()
    print(text, end='')
  return EXIT_OK


# --------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
  parser = argparse.ArgumentParser(
      prog='dpaudit', description='Audit DP-SGD with adversary games.')
  parser.add_argument('-v', '--verbose', action='store_true')
  sub = parser.add_subparsers(dest='command', required=True)

  p = sub.add_parser('calibrate', help='noise multiplier for a target eps')
  p.add_argument('--config', help='read the privacy section from here')
  p.add_argument('--epsilon', type=float)
  p.add_argument('--sampling-rate', type=float)
  p.add_argument('--steps', type=int)
  p.add_argument('--epochs', type=float)
  p.add_argument('--delta', type=float)
  p.add_argument('--method', choices=('rdp', 'gdp'))
  p.set_defaults(func=cmd_calibrate)

  p = sub.add_parser('audit', help='run a configured game')
  p.add_argument('--config', required=True)
  p.add_argument('--trials', type=int)
  p.add_argument('--parallelism', type=int)
  p.add_argument('--seed', type=int)
  p.add_argument('--out', help='output directory')
  p.set_defaults(func=cmd_audit)

  p = sub.add_parser('report', help='tabulate audit summaries')
  p.add_argument('results', nargs='+',
                 help='summary files, globs or result directories')
  p.add_argument('--out', help='write the CSV here instead of stdout')
  p.set_defaults(func=cmd_report)
  return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
  args = build_parser().parse_args(argv)
  logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                      format='%(levelname)s %(name)s: %(message)s')
  try:
    return args.func(args)
  except _Failure as e:
    print(f'error: {e}', file=sys.stderr)
    return e.code
  except config.ConfigError as e:
    print(f'config error:\n{e}', file=sys.stderr)
    return EXIT_CONFIG
  except (ArithmeticError, FloatingPointError, OSError, ValueError) as e:
    print(f'runtime failure: {e}', file=sys.stderr)
    return EXIT_RUNTIME


if __name__ == '__main__':
  sys.exit(main())
