import dataclasses

import numpy as np
import pytest

from conftest import small_replication
from coupled_nhp.gates import expected_gate
from coupled_nhp.hawkes import event_log_likelihood, intensity
from coupled_nhp.latent_state import filter_smooth
from coupled_nhp.trainer import (
    VARIANTS, CoupledModel, FitConfig, effective_B, effective_gamma, fit_coupled, gate_sets,
    joint_objective, make_variant, objective_parts,
)


@pytest.fixture(scope="module")
def rep():
    return small_replication(3)[1]


@pytest.fixture(scope="module")
def model(rep):
    return fit_coupled(FitConfig(), rep.stream, rep.response, counts=rep.counts)


def _diff(a: FitConfig, b: FitConfig):
    return [f.name for f in dataclasses.fields(a) if getattr(a, f.name) != getattr(b, f.name)]


def test_variant_registry_has_ten_single_flag_variants():
    base = FitConfig()
    assert len(VARIANTS) == 10
    seen = set()
    for name in VARIANTS:
        v = make_variant(base, name)
        assert len(_diff(base, v)) == 1, name
        seen.add(tuple(sorted(v.to_json().items())))
    assert len(seen) == 10


def test_named_variants():
    base = FitConfig()
    assert _diff(base, make_variant(base, "no_response_head")) == ["enable_head"]
    assert make_variant(base, "no_response_head").enable_head is False
    assert make_variant(base, "add_r_to_i").enable_ri is True
    with pytest.raises(ValueError):
        make_variant(base, "no_such_variant")


def test_direction_switches():
    assert FitConfig().directions() == (True, False)
    assert make_variant(FitConfig(), "reverse_only").directions() == (False, True)
    assert make_variant(FitConfig(), "no_coupling").directions() == (False, False)


def test_config_json_and_validation(tmp_path):
    cfg = FitConfig(seed=5, lambda_sp=0.5)
    assert FitConfig.from_json(cfg.to_json()) == cfg
    with pytest.raises(ValueError):
        FitConfig.from_json({"bogus": 1})
    with pytest.raises(ValueError):
        FitConfig(em_iterations=0)
    with pytest.raises(ValueError):
        FitConfig(count_selfexciting_mix=1.5)


def test_disabled_directions_are_exact_zeros(model):
    cfg = make_variant(model.config, "no_coupling")
    assert np.all(effective_B(model.theta, cfg) == 0)
    assert np.all(effective_gamma(model.theta, cfg) == 0)
    assert gate_sets(model.theta, cfg) == []


def test_decomposition_without_coupling(rep):
    cfg = FitConfig(enable_coupling=False, em_iterations=2, lambda_sp=3.0)
    m = fit_coupled(cfg, rep.stream, rep.response, counts=rep.counts)
    ev = objective_parts(m, rep.stream, rep.response)
    assert ev.penalty == 0.0
    assert ev.J == pytest.approx(ev.ll_event + ev.ll_response + ev.ll_dynamics - ev.kl, abs=1e-9)


def test_lambda_linearity(model, rep):
    m0 = dataclasses.replace(model, config=dataclasses.replace(model.config, lambda_sp=0.0))
    m1 = dataclasses.replace(model, config=dataclasses.replace(model.config, lambda_sp=0.01))
    total = sum(expected_gate(g).sum() for g in gate_sets(model.theta, model.config))
    j0 = joint_objective(m0, rep.stream, rep.response)
    j1 = joint_objective(m1, rep.stream, rep.response)
    assert j0 - j1 == pytest.approx(0.01 * total, abs=1e-9)


def test_component_sum_oracle(model, rep):
    """Recompute each part from the component modules and add them up."""
    n = model.n_train
    counts = rep.counts[:n]
    x = (counts - model.x_mean) / model.x_std
    fs = filter_smooth(model.state, x, rep.response[:n], frozen=model.theta.zeta)
    ll = event_log_likelihood(model.hawkes, rep.stream.window(0, n) if rep.stream.horizon > n
                              else rep.stream, None)
    pen = model.config.lambda_sp * sum(expected_gate(g).sum() for g in gate_sets(model.theta, model.config))
    direct = ll + fs.ll_response + fs.ll_dynamics - fs.kl - pen
    assert abs(joint_objective(model, rep.stream, rep.response) - direct) < 1e-10


def test_trace_monotone(model):
    tr = np.array(model.objective_trace)
    assert len(tr) == model.config.em_iterations + 1
    assert np.all(np.diff(tr) >= -1e-6)
    assert tr[-1] == pytest.approx(model.objective_trace[-1])


def test_final_objective_matches_trace(model, rep):
    assert joint_objective(model, rep.stream, rep.response) == pytest.approx(
        model.objective_trace[-1], abs=1e-8)


def test_determinism(rep, model):
    again = fit_coupled(FitConfig(), rep.stream, rep.response, counts=rep.counts)
    assert again.to_json() == model.to_json()


def test_disabled_reverse_direction_purity(model, rep):
    assert np.all(model.hawkes.gamma == 0)
    zero = dataclasses.replace(model.hawkes, gamma=np.zeros_like(model.hawkes.gamma))
    lat = np.ones((rep.stream.n_months, model.config.K))
    for t in (0.5, 10.25, 30.9):
        assert np.array_equal(intensity(model.hawkes, rep.stream, lat, t),
                              intensity(zero, rep.stream, lat, t))


def test_short_window_rejected(rep):
    with pytest.raises(ValueError):
        fit_coupled(FitConfig(), rep.stream, rep.response, train_stop=12, counts=rep.counts)


def test_json_roundtrip_preserves_forecasts(model, rep, tmp_path):
    p = tmp_path / "m.json"
    model.save(p)
    back = CoupledModel.load(p)
    months = np.arange(40, 48)
    assert np.array_equal(back.count_forecasts(rep.stream, rep.response, months),
                          model.count_forecasts(rep.stream, rep.response, months))
    assert np.array_equal(back.response_forecasts(rep.response, rep.counts, months),
                          model.response_forecasts(rep.response, rep.counts, months))


def test_response_blend(model, rep):
    months = np.arange(40, 48)
    no_head = dataclasses.replace(model, config=dataclasses.replace(model.config, enable_head=False))
    state_fc = no_head.response_forecasts(rep.response, rep.counts, months)
    from coupled_nhp.forecast_head import head_forecasts
    head_fc = head_forecasts(model.head, rep.response[:, 0], rep.counts, months)
    a = model.config.blend_alpha
    assert np.allclose(model.response_forecasts(rep.response, rep.counts, months),
                       a * head_fc + (1 - a) * state_fc, atol=1e-12)


def test_forecasts_do_not_look_ahead(model, rep):
    months = np.arange(40, 44)
    y2 = rep.response.copy()
    c2 = rep.counts.copy()
    y2[44:] += 50
    c2[44:] += 100
    assert np.array_equal(model.response_forecasts(y2, c2, months),
                          model.response_forecasts(rep.response, rep.counts, months))


def test_count_forecasts_positive(model, rep):
    fc = model.count_forecasts(rep.stream, rep.response, np.arange(40, 48))
    assert fc.shape == (8, rep.counts.shape[1]) and np.all(fc > 0)
    assert model.count_resid_var >= 1.0


def test_two_way_fit_runs_monotone():
    _, rep = small_replication(5, "two-way")
    m = fit_coupled(FitConfig(enable_ri=True, em_iterations=3), rep.stream, rep.response,
                    counts=rep.counts)
    assert np.all(np.diff(m.objective_trace) >= -1e-6)
    fc = m.count_forecasts(rep.stream, rep.response, np.arange(40, 48))
    assert np.all(np.isfinite(fc))
