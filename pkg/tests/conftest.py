import os
import sys

import pytest

# Make the shared oracle module importable from every test file.
sys.path.insert(0, os.path.dirname(__file__))

_VERDICTS = pytest.StashKey[list]()


def pytest_configure(config):
  config.stash[_VERDICTS] = []


@pytest.fixture
def verdict(request):
  """Records one PASS/FAIL line for an acceptance criterion, then asserts."""

  def record(number: int, name: str, ok: bool, detail: str):
    line = f'CRITERION {number} [{name}]: {"PASS" if ok else "FAIL"} | {detail}'
    request.config.stash[_VERDICTS].append((number, line))
    print(line)
    assert ok, line

  return record


def pytest_terminal_summary(terminalreporter, config):
  lines = sorted(config.stash.get(_VERDICTS, []))
  if lines:
    terminalreporter.section('acceptance criteria')
    for _, line in lines:
      terminalreporter.write_line(line)
