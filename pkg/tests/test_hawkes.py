import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coupled_nhp.hawkes import (
    EventStream, HawkesParams, _offsets, counts_to_stream, event_log_likelihood,
    event_log_likelihood_grad, expected_month_counts, intensity, inv_softplus,
    monthly_counts, simulate_thinning, softplus,
)

from hawkes_oracles import fine_compensator, naive_intensity, naive_log_term

MU_ONE = math.log(math.e - 1)


def random_instance(seed, D=None, T=None, K=1):
    r = np.random.default_rng(seed)
    D = int(r.integers(1, 4)) if D is None else D
    T = int(r.integers(3, 13)) if T is None else T
    p = HawkesParams(r.normal(0, 1, D), r.uniform(0, 0.6 / D, (D, D)),
                     r.uniform(0.3, 2.0, (D, D)), r.normal(0, 0.5, (D, K)))
    z = r.normal(size=(T, K))
    return p, z, simulate_thinning(p, z, T, seed)


def test_intensity_no_events():
    p = HawkesParams(np.zeros(1), np.zeros((1, 1)), np.ones((1, 1)), np.zeros((1, 0)))
    s = EventStream(np.zeros(0), np.zeros(0, dtype=np.int64), 2.0, 1)
    assert intensity(p, s, None, 0.3)[0] == pytest.approx(math.log(2), abs=1e-12)


def test_intensity_left_limit():
    p = HawkesParams(np.zeros(1), np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 0)))
    s = EventStream(np.array([0.5]), np.array([0]), 2.0, 1)
    assert intensity(p, s, None, 0.5)[0] == pytest.approx(math.log(2), abs=1e-12)
    assert intensity(p, s, None, 0.5 + 1e-12)[0] == pytest.approx(1.313262, abs=1e-6)


def test_intensity_out_of_range():
    p, z, s = random_instance(0)
    with pytest.raises(ValueError):
        intensity(p, s, z, s.horizon + 0.1)
    with pytest.raises(ValueError):
        intensity(p, s, z[:1], 0.5)


@pytest.mark.parametrize("seed", range(10))
def test_intensity_matches_naive_sum(seed):
    p, z, s = random_instance(seed, D=3)
    off = _offsets(p, z, s.n_months)
    r = np.random.default_rng(seed)
    probes = np.concatenate([r.uniform(0, s.horizon, 20), s.times[:5]])
    for t in probes:
        np.testing.assert_allclose(intensity(p, s, z, t), naive_intensity(p, s, off, t),
                                   rtol=1e-12, atol=1e-12)


def test_homogeneous_poisson_cases():
    p = HawkesParams.constant(1, rate=1.0)
    assert p.mu[0] == pytest.approx(MU_ONE)
    three = EventStream(np.array([0.2, 0.9, 1.7]), np.zeros(3, dtype=np.int64), 2, 1)
    assert event_log_likelihood(p, three) == pytest.approx(-2.0, abs=1e-9)
    empty = EventStream(np.zeros(0), np.zeros(0, dtype=np.int64), 5, 1)
    assert event_log_likelihood(p, empty) == pytest.approx(-5.0, abs=1e-9)


@settings(max_examples=30, deadline=None)
@given(st.floats(0.05, 50), st.integers(0, 40), st.integers(1, 24), st.integers(1, 3))
def test_homogeneous_poisson_closed_form(c, n, T, D):
    r = np.random.default_rng(n)
    p = HawkesParams.constant(D, rate=c)
    s = EventStream(np.sort(r.uniform(0, T, n)), r.integers(0, D, n), T, D)
    assert event_log_likelihood(p, s) == pytest.approx(n * math.log(c) - c * T * D,
                                                        rel=1e-12, abs=1e-9)


def test_compensator_exact_for_constants():
    p = HawkesParams(np.array([0.3, -1.2]), np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 0)))
    s = EventStream(np.array([0.1, 3.3]), np.array([0, 1]), 6, 2)
    log_term = math.log(softplus(0.3)) + math.log(softplus(-1.2))
    comp = log_term - event_log_likelihood(p, s)
    assert comp == pytest.approx(6 * (softplus(0.3) + softplus(-1.2)), rel=1e-13)


def test_log_term_matches_naive():
    for seed in range(5):
        p, z, s = random_instance(seed)
        off = _offsets(p, z, s.n_months)
        comp = fine_compensator(p, s, off)
        ll = event_log_likelihood(p, s, z)
        assert ll == pytest.approx(naive_log_term(p, s, off) - comp, rel=0.01)


def test_excitatory_d2_compensator():
    p = HawkesParams(np.array([0.5, 0.0]), np.array([[0.3, 0.2], [0.1, 0.4]]),
                     np.array([[1.0, 0.5], [2.0, 1.5]]), np.zeros((2, 0)))
    s = simulate_thinning(p, None, 24, 3)
    off = np.zeros((24, 2))
    comp = naive_log_term(p, s, off) - event_log_likelihood(p, s)
    assert comp == pytest.approx(fine_compensator(p, s, off), rel=0.01)


def test_tied_events_use_strict_left_limit():
    p = HawkesParams(np.zeros(2), np.full((2, 2), 0.5), np.ones((2, 2)), np.zeros((2, 0)))
    s = EventStream(np.array([1.0, 1.0, 1.0]), np.array([1, 0, 1]), 3, 2)
    off = np.zeros((3, 2))
    expected_log = 3 * math.log(math.log(2))
    comp = fine_compensator(p, s, off)
    assert event_log_likelihood(p, s) == pytest.approx(expected_log - comp, rel=0.01)


@pytest.mark.parametrize("seed", range(6))
def test_gradients_central_differences(seed):
    p, z, s = random_instance(seed, D=2, T=6)
    ll, g = event_log_likelihood_grad(p, s, z)
    assert ll == pytest.approx(event_log_likelihood(p, s, z), rel=1e-14)
    h = 1e-6
    for name in ("mu", "alpha", "omega", "gamma"):
        base = getattr(p, name)
        for idx in np.ndindex(base.shape):
            up, dn = base.copy(), base.copy()
            up[idx] += h
            dn[idx] -= h
            if name == "alpha" and dn[idx] < 0:
                continue
            fd = (event_log_likelihood(type(p)(**{**_fields(p), name: up}), s, z)
                  - event_log_likelihood(type(p)(**{**_fields(p), name: dn}), s, z)) / (2 * h)
            assert g[name][idx] == pytest.approx(fd, rel=1e-5, abs=1e-7), (name, idx)


def _fields(p):
    return {"mu": p.mu, "alpha": p.alpha, "omega": p.omega, "gamma": p.gamma}


def test_param_validation():
    with pytest.raises(ValueError):
        HawkesParams(np.zeros(1), -np.ones((1, 1)), np.ones((1, 1)), np.zeros((1, 0)))
    with pytest.raises(ValueError):
        HawkesParams(np.zeros(1), np.ones((1, 1)), np.zeros((1, 1)), np.zeros((1, 0)))


def test_vanishing_rate_is_empty():
    p = HawkesParams(np.full(2, -30.0), np.zeros((2, 2)), np.ones((2, 2)), np.zeros((2, 0)))
    for seed in range(100):
        assert len(simulate_thinning(p, None, 120, seed)) == 0


def test_constant_rate_clt():
    p = HawkesParams.constant(1, rate=1.0)
    n = np.array([len(simulate_thinning(p, None, 120, seed)) for seed in range(200)])
    assert abs(n.mean() - 120) < 3 * math.sqrt(120 / 200)


def test_thinning_per_month_calibration():
    # per-month empirical rates against the analytic expected counts
    p = HawkesParams(np.array([0.2, -0.3]), np.array([[0.25, 0.15], [0.1, 0.3]]),
                     np.array([[1.2, 0.8], [1.0, 1.5]]), np.zeros((2, 0)))
    T, n_seeds = 6, 400
    counts = np.zeros((n_seeds, T, 2))
    expected = np.zeros((n_seeds, T, 2))
    for seed in range(n_seeds):
        s = simulate_thinning(p, None, T, seed)
        counts[seed] = monthly_counts(s, components=("a", "b")).counts
        # month-ahead expectation given the realized past, averaged over seeds,
        # is an unbiased estimate of the unconditional monthly mean
        expected[seed] = expected_month_counts(p, s, np.arange(T), np.zeros((T, 2)), substeps=48)
    diff = counts - expected
    se = diff.std(axis=0, ddof=1) / math.sqrt(n_seeds)
    z = diff.mean(axis=0) / se
    assert np.all(np.abs(z) < 3), z


def test_simulation_determinism():
    p, z, _ = random_instance(4, D=3, T=10)
    a = simulate_thinning(p, z, 10, 99)
    b = simulate_thinning(p, z, 10, 99)
    assert a.times.tobytes() == b.times.tobytes()
    assert a.components.tobytes() == b.components.tobytes()


def test_self_consistency_of_generator_and_scorer():
    p = HawkesParams(np.array([0.8, 0.2]), np.array([[0.3, 0.1], [0.2, 0.2]]),
                     np.full((2, 2), 1.0), np.zeros((2, 0)))
    q = HawkesParams(p.mu - 0.5, p.alpha * 0.3, p.omega * 2, p.gamma)
    gaps = []
    for seed in range(50):
        s = simulate_thinning(p, None, 24, seed)
        a, b = event_log_likelihood(p, s), event_log_likelihood(q, s)
        assert np.isfinite(a)
        gaps.append(a - b)
    assert np.mean(gaps) > 0


def test_supercritical_warns_and_caps():
    p = HawkesParams(np.zeros(1), np.full((1, 1), 1.5), np.ones((1, 1)), np.zeros((1, 0)))
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        s = simulate_thinning(p, None, 60, 0, max_events=500)
    assert len(s) == 500
    assert any(issubclass(x.category, RuntimeWarning) for x in w)


def test_monthly_counts_bins():
    empty = EventStream(np.zeros(0), np.zeros(0, dtype=np.int64), 3, 8)
    assert monthly_counts(empty).counts.shape == (3, 8)
    assert not monthly_counts(empty).counts.any()
    s = EventStream(np.array([0.5, 1.5]), np.array([0, 0]), 2, 8)
    np.testing.assert_array_equal(monthly_counts(s).counts[:, 0], [1, 1])
    with pytest.raises(ValueError):
        monthly_counts(EventStream(np.zeros(0), np.zeros(0, dtype=np.int64), 2.5, 8))


def test_mass_conservation():
    p, z, s = random_instance(8, D=3, T=12)
    assert monthly_counts(s, components=("a", "b", "c")).counts.sum() == len(s)


def test_counts_to_stream_roundtrip():
    r = np.random.default_rng(0)
    c = r.poisson(3, size=(5, 4))
    s = counts_to_stream(c)
    np.testing.assert_array_equal(monthly_counts(s, components=tuple("abcd")).counts, c)


def test_stream_csv_roundtrip(tmp_path):
    _, _, s = random_instance(2, D=2, T=8)
    s.save(tmp_path / "e.csv")
    back = EventStream.load(tmp_path / "e.csv", s.horizon, s.D)
    np.testing.assert_allclose(back.times, s.times, atol=1e-9)
    np.testing.assert_array_equal(back.components, s.components)


def test_tie_order_is_time_component_input():
    s = EventStream(np.array([1.0, 0.5, 1.0, 1.0]), np.array([2, 1, 0, 2]), 2, 3)
    np.testing.assert_array_equal(s.components, [1, 0, 2, 2])


def test_expected_counts_constant_rate():
    p = HawkesParams.constant(3, rate=2.5)
    s = EventStream(np.zeros(0), np.zeros(0, dtype=np.int64), 4, 3)
    np.testing.assert_allclose(expected_month_counts(p, s, [0, 1, 2], np.zeros((3, 3))), 2.5,
                               rtol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_positivity(seed):
    p, z, s = random_instance(seed)
    t = np.random.default_rng(seed).uniform(0, s.horizon)
    assert np.all(intensity(p, s, z, t) > 0)


def test_inv_softplus():
    x = np.array([-5.0, 0.0, 3.0, 40.0])
    np.testing.assert_allclose(inv_softplus(softplus(x)), x, rtol=1e-10)
