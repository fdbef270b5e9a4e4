import numpy as np
import pytest

from coupled_nhp.panel import COMPONENTS, TRENDS_TERMS, CountPanel, TrendsPanel


@pytest.fixture
def rng():
    return np.random.default_rng(7)


def make_trends(n_months=36, n_terms=5, seed=0, origin="2014-01"):
    r = np.random.default_rng(seed)
    base = np.cumsum(r.normal(size=n_months))
    vals = 50 + 10 * base[:, None] * r.uniform(0.5, 1.5, size=n_terms) \
        + r.normal(0, 3, size=(n_months, n_terms))
    vals = np.clip(vals, 0, 100)
    return TrendsPanel(origin, np.arange(n_months), TRENDS_TERMS[:n_terms], vals)


def make_counts(n_months=24, seed=0, origin="2014-01", scale=20):
    r = np.random.default_rng(seed)
    return CountPanel(origin, np.arange(n_months),
                      r.poisson(scale, size=(n_months, len(COMPONENTS))))


def small_replication(seed, scenario="one-way", months=48, D=4, **kw):
    """A short planted-structure replication for quick fits."""
    from coupled_nhp.semisynthetic import ScenarioConfig, generate_replication, plant_ground_truth
    sc = ScenarioConfig(D=D, months=months, n_forward=2, n_reverse=1, **kw)
    gt = plant_ground_truth(seed, 0, scenario, sc)
    return gt, generate_replication(gt, months)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(RESULTS):
            terminalreporter.write_line(RESULTS[n])
