import itertools
import math
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coupled_nhp.evaluation import (
    BASE_SEED, ScoreStream, ablation_delta, block_bootstrap_ci, block_indices, bootstrap_stats,
    count_pll, count_rmse, fnv1a_64, gaussian_logpdf, label_registry, label_seed, paired_delta_ci,
    read_streams, regret_table, response_rmse, write_metrics, write_streams,
)


class FixedModel:
    """Stub with preset forecasts, for metric arithmetic."""

    def __init__(self, counts_fc, resp_fc, var=1.0):
        self.counts_fc = np.asarray(counts_fc, dtype=float)
        self.resp_fc = np.asarray(resp_fc, dtype=float)
        self.count_resid_var = var

    def count_forecasts(self, stream, y, months):
        return self.counts_fc[np.asarray(months)]

    def response_forecasts(self, y, counts, months):
        return self.resp_fc[np.asarray(months)]


def test_fnv_reference_values():
    # published FNV-1a 64-bit test vectors
    assert fnv1a_64("") == 0xCBF29CE484222325
    assert fnv1a_64("a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64("foobar") == 0x85944171F73967E8


def test_label_seed_xor():
    assert label_seed("a", 0) == 0xAF63DC4C8601EC8C
    assert label_seed("a", BASE_SEED) == BASE_SEED ^ 0xAF63DC4C8601EC8C


def test_registry_injective():
    labels = label_registry()
    assert len(set(labels)) == len(labels)
    seeds = {label_seed(l) for l in labels}
    assert len(seeds) == len(labels)


def test_pll_at_mode():
    counts = np.full((12, 2), 5)
    m = FixedModel(np.full((12, 2), 5.0), np.zeros(12), 1.0)
    s = count_pll(m, None, None, counts, np.arange(12))
    assert np.allclose(s.per_month, -0.5 * math.log(2 * math.pi))
    assert s.aggregate == pytest.approx(-11.027, abs=1e-3)


def test_pll_matches_density_oracle():
    rng = np.random.default_rng(0)
    counts = rng.poisson(30, size=(12, 3))
    fc = rng.uniform(20, 40, size=(12, 3))
    var = 17.3
    s = count_pll(FixedModel(fc, np.zeros(12), var), None, None, counts, np.arange(12))
    tot, mean = counts.sum(axis=1), fc.sum(axis=1)
    oracle = [-0.5 * math.log(2 * math.pi * var) - (t - mu) ** 2 / (2 * var) for t, mu in zip(tot, mean)]
    assert np.max(np.abs(s.per_month - oracle)) < 1e-12


def test_nonpositive_variance_rejected():
    with pytest.raises(ValueError):
        gaussian_logpdf(1.0, 0.0, 0.0)


def test_rmse_trivial():
    counts = np.full((12, 2), 5)
    perfect = FixedModel(np.full((12, 2), 5.0), np.ones(12))
    assert count_rmse(perfect, None, None, counts, np.arange(12)).aggregate == 0.0
    off = FixedModel(np.full((12, 2), 10.0), np.ones(12))
    assert count_rmse(off, None, None, counts, np.arange(12)).aggregate == pytest.approx(10.0)
    y = np.ones(12)
    assert response_rmse(perfect, y, counts, np.arange(12)).aggregate == 0.0


def test_response_rmse_from_emitted_csv(tmp_path):
    rng = np.random.default_rng(1)
    y = rng.normal(size=24)
    m = FixedModel(np.zeros((24, 1)), rng.normal(size=24))
    s = response_rmse(m, y, None, np.arange(12, 24), "x/resp_rmse")
    write_streams(tmp_path / "s.csv", [s])
    import csv
    vals = [float(r["value"]) for r in csv.DictReader(open(tmp_path / "s.csv"))]
    assert math.sqrt(sum(vals) / len(vals)) == pytest.approx(s.aggregate, rel=1e-6)
    assert s.aggregate == pytest.approx(np.sqrt(np.mean((y[12:] - m.resp_fc[12:]) ** 2)))


def test_block_indices_shape_and_range():
    rng = np.random.default_rng(0)
    for n in range(3, 30):
        idx = block_indices(n, 3, rng)
        assert len(idx) == n and idx.min() >= 0 and idx.max() < n


def test_constant_stream_zero_width():
    s = ScoreStream("c", np.arange(12), np.full(12, 2.5))
    ci = block_bootstrap_ci(s, B=200)
    assert ci.lo == ci.hi == ci.point == 30.0


def test_same_label_same_interval():
    v = np.random.default_rng(2).normal(size=12)
    a = block_bootstrap_ci(ScoreStream("lab", np.arange(12), v), B=300)
    b = block_bootstrap_ci(ScoreStream("lab", np.arange(12), v.copy()), B=300)
    assert (a.lo, a.hi) == (b.lo, b.hi)


def test_draws_are_order_independent():
    s = ScoreStream("order", np.arange(12), np.random.default_rng(3).normal(size=12))
    fwd = bootstrap_stats(s, B=50)
    rev = bootstrap_stats(s, draws=range(49, -1, -1))
    assert np.array_equal(fwd, rev[::-1])
    # split across "workers"
    parts = np.concatenate([bootstrap_stats(s, draws=range(0, 20)),
                            bootstrap_stats(s, draws=range(20, 50))])
    assert np.array_equal(fwd, parts)


def test_degenerate_n3_block3_exhaustive():
    vals = np.array([1.0, -4.0, 2.5])
    s = ScoreStream("tiny", np.arange(3), vals)
    # enumerate every possible resample: only start 0 exists
    starts = range(0, 3 - 3 + 1)
    outcomes = {float(np.sum(vals[[st, st + 1, st + 2]])) for st in starts}
    ci = block_bootstrap_ci(s, block=3, B=100)
    assert outcomes == {ci.lo} == {ci.hi} == {ci.point}


def test_exhaustive_small_case_distribution():
    """n=4, block=2: resample distribution matches exhaustive enumeration."""
    vals = np.array([1.0, 2.0, 4.0, 8.0])
    s = ScoreStream("enum", np.arange(4), vals)
    stats = bootstrap_stats(s, block=2, B=6000)
    exact = sorted(vals[a:a + 2].sum() + vals[b:b + 2].sum()
                   for a, b in itertools.product(range(3), repeat=2))
    assert set(stats) <= set(exact)
    for v in set(exact):
        assert abs(np.mean(stats == v) - exact.count(v) / 9) < 0.03


def test_short_stream_rejected():
    with pytest.raises(ValueError):
        block_bootstrap_ci(ScoreStream("s", np.arange(2), np.ones(2)))


def test_paired_identical_is_zero():
    v = np.random.default_rng(4).normal(size=12)
    a = ScoreStream("a", np.arange(12), v)
    ci = paired_delta_ci(a, a, B=200)
    assert ci.point == ci.lo == ci.hi == 0.0


def test_paired_point_and_month_check():
    rng = np.random.default_rng(5)
    a = ScoreStream("a", np.arange(12), rng.normal(size=12))
    b = ScoreStream("b", np.arange(12), rng.normal(size=12))
    ci = paired_delta_ci(a, b, B=100)
    assert ci.point == pytest.approx(a.per_month.sum() - b.per_month.sum(), abs=1e-12)
    with pytest.raises(ValueError):
        paired_delta_ci(a, ScoreStream("c", np.arange(1, 13), np.zeros(12)))


def test_ablation_orientation():
    m = np.arange(12)
    good = ScoreStream("p", m, np.full(12, -1.0))
    bad = ScoreStream("v", m, np.full(12, -2.0))
    assert ablation_delta(good, bad, "count_pll", B=50).point > 0
    lo_err = ScoreStream("p", m, np.full(12, 1.0), "rms")
    hi_err = ScoreStream("v", m, np.full(12, 4.0), "rms")
    assert ablation_delta(lo_err, hi_err, "resp_rmse", B=50).point == pytest.approx(1.0)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=3, max_size=20), st.sampled_from(["sum", "rms"]))
def test_interval_ordered(values, reduction):
    v = np.abs(values) if reduction == "rms" else np.array(values)
    ci = block_bootstrap_ci(ScoreStream("h", np.arange(len(v)), v, reduction), B=50)
    assert ci.lo <= ci.hi


def test_regret():
    assert regret_table({"m": {"count_pll": -3.0}}) == {"m": {"count_pll": 0.0}}
    r = regret_table({"a": {"count_pll": -30.0, "resp_rmse": 0.4},
                      "b": {"count_pll": -35.0, "resp_rmse": 0.3}})
    assert r["a"] == {"count_pll": 0.0, "resp_rmse": pytest.approx(0.1)}
    assert r["b"] == {"count_pll": 5.0, "resp_rmse": 0.0}


def test_regret_brute_force():
    rng = np.random.default_rng(6)
    res = {f"m{i}": {"count_pll": rng.normal(), "count_rmse": rng.uniform()} for i in range(6)}
    r = regret_table(res)
    for k in res:
        assert r[k]["count_pll"] == max(v["count_pll"] for v in res.values()) - res[k]["count_pll"]
        assert r[k]["count_rmse"] == res[k]["count_rmse"] - min(v["count_rmse"] for v in res.values())


def test_stream_csv_roundtrip(tmp_path):
    a = ScoreStream("x/count_pll", np.arange(5, 17), np.linspace(-3, 1, 12))
    b = ScoreStream("x/resp_rmse", np.arange(5, 17), np.linspace(0, 1, 12), "rms")
    write_streams(tmp_path / "s.csv", [a, b])
    back = {s.label: s for s in read_streams(tmp_path / "s.csv")}
    assert back["x/resp_rmse"].reduction == "rms"
    assert np.allclose(back["x/count_pll"].per_month, a.per_month, atol=1e-6)
    write_metrics(tmp_path / "m.csv", {("x", "count_pll"): block_bootstrap_ci(a, B=20)})
    assert (tmp_path / "m.csv").read_text().splitlines()[0] == "label,metric,point,lo,hi"


CHILD = """
import numpy as np
from coupled_nhp.evaluation import ScoreStream, block_bootstrap_ci
v = np.sin(np.arange(12) * 1.7)
ci = block_bootstrap_ci(ScoreStream("coupled/count_pll", np.arange(12), v))
print(repr(ci.lo), repr(ci.hi))
"""


def test_reproducible_across_processes():
    outs = {subprocess.run([sys.executable, "-c", CHILD], capture_output=True, text=True,
                           check=True).stdout for _ in range(2)}
    assert len(outs) == 1
