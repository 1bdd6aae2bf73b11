import numpy as np
import pytest

from safefield.gibbs import make_rng
from safefield.synth import LeagueConfig, simulate_league


@pytest.fixture
def rng():
    return make_rng(20240501)


@pytest.fixture(scope="session")
def small_league():
    """A compact synthetic season shared by pipeline-level tests."""
    cfg = LeagueConfig(players_per_position=12, median_opportunities=300)
    records, truth = simulate_league(cfg, make_rng(7))
    return records, truth


class StubRng:
    """Replays fixed arrays in place of random draws."""

    def __init__(self, random=(), normal=(), gamma=(), exponential=()):
        self._q = {"random": list(random), "normal": list(normal), "gamma": list(gamma),
                   "exponential": list(exponential)}

    def _take(self, key, size):
        n = int(np.prod(size)) if size is not None else 1
        vals, self._q[key] = self._q[key][:n], self._q[key][n:]
        if len(vals) != n:
            raise AssertionError(f"stub ran out of {key} values")
        arr = np.array(vals, dtype=float)
        return arr.reshape(size) if size is not None else arr[0]

    def random(self, size=None):
        return self._take("random", size)

    def standard_normal(self, size=None):
        return self._take("normal", size)

    def standard_gamma(self, shape, size=None):
        shape = np.asarray(shape)
        return self._take("gamma", shape.shape if shape.ndim else size)

    def standard_exponential(self, size=None):
        return self._take("exponential", size)

    def remaining(self):
        return {k: len(v) for k, v in self._q.items()}


def pytest_terminal_summary(terminalreporter):
    """One PASS/FAIL line per acceptance criterion that ran."""
    import sys
    mod = sys.modules.get("test_acceptance")
    verdicts = getattr(mod, "VERDICTS", None)
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in verdicts:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
