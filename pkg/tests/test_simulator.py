import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from graphon_lqc.applications import SystemicParams, TradingParams, build_systemic, build_trading
from graphon_lqc.kernels import LabelGrid
from graphon_lqc.model import TimeGrid, zero_spec
from graphon_lqc.riccati import solve_backward, value_function
from graphon_lqc.simulator import (CostEstimate, Feedback, OpenLoopField, PerturbedFeedback, SimulationError,
                                   draw_noise, estimate_cost, fundamental_relation_residual,
                                   nested_mean_check, propagate_conditional_mean, quadratic_penalty,
                                   sample_costs, simulate_paths, trajectory_quantiles, write_report)


@pytest.fixture(scope="module")
def systemic_small():
    spec = build_systemic(SystemicParams(n_labels=4, n_steps=20, xi_mean=[0.0, 0.3, 0.6, 0.9], xi_var=0.05,
                                         G_kappa={"name": "exp", "length": 0.5}))
    return spec, solve_backward(spec)


# --- conditional mean -------------------------------------------------------

def test_conditional_mean_zero_fixed_point():
    spec = zero_spec(LabelGrid(3), TimeGrid(0, 1, 10), B=1.0, A=-0.5, Q=1.0, H=1.0)
    sol = solve_backward(spec)
    xb = propagate_conditional_mean(spec, sol, Feedback(sol), np.zeros(10))
    assert np.all(xb == 0)


def test_conditional_mean_common_noise_integrator():
    spec = zero_spec(LabelGrid(3), TimeGrid(0, 1, 10), B=1.0, theta=0.4,
                     xi_mean=np.array([1.0, 2.0, 3.0])[:, None])
    sol = solve_backward(spec)
    dB = np.random.default_rng(0).normal(size=10) * 0.3
    xb = propagate_conditional_mean(spec, sol, Feedback(sol), dB)
    expected = spec.xi_mean[None] + 0.4 * np.concatenate([[0.0], np.cumsum(dB)])[:, None, None]
    assert np.allclose(xb, expected, atol=1e-14)


def test_conditional_mean_matches_ensemble(systemic_small):
    spec, sol = systemic_small
    ens = simulate_paths(spec, sol, Feedback(sol), 3, 2, seed=4)
    xb = propagate_conditional_mean(spec, sol, Feedback(sol), ens.common_paths)
    assert np.array_equal(xb, ens.Xbar)


def test_conditional_mean_nested_mc(systemic_small):
    spec, sol = systemic_small
    xb, mean, se = nested_mean_check(spec, sol, Feedback(sol), 4000, seed=2)
    assert np.all(np.abs(mean - xb) <= 3 * se + 1e-15)


def test_unsupported_policy():
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 1, 2))
    with pytest.raises(TypeError):
        propagate_conditional_mean(spec, None, object(), np.zeros(2))


def test_policy_dimension_checks():
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 1, 2))
    with pytest.raises(ValueError):
        simulate_paths(spec, None, OpenLoopField(np.zeros((2, 3))), 1, 1, 0)
    with pytest.raises(ValueError):
        OpenLoopField(np.array([[np.nan], [0.0]]))
    sol = solve_backward(spec)
    with pytest.raises(ValueError):
        PerturbedFeedback(sol, np.array([[np.inf], [0.0]]), 0.1)


# --- paths ------------------------------------------------------------------

def test_zero_coefficients_paths_constant():
    spec = zero_spec(LabelGrid(3), TimeGrid(0, 1, 5), xi_cov=1.0)
    ens = simulate_paths(spec, None, OpenLoopField(np.zeros((3, 1))), 2, 3, seed=1)
    assert np.all(ens.X == ens.X[:, :, :1])


def test_open_loop_drift_exact():
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 2, 7), B=1.0, xi_cov=0.5)
    ens = simulate_paths(spec, None, OpenLoopField(np.full((2, 1), 0.75)), 2, 4, seed=3)
    assert np.allclose(ens.X[:, :, -1], ens.X[:, :, 0] + 0.75 * 2.0, atol=1e-14)


def test_seed_determinism_and_batching(systemic_small, monkeypatch):
    import graphon_lqc.simulator as sim
    spec, sol = systemic_small
    a = simulate_paths(spec, sol, Feedback(sol), 5, 3, seed=9)
    monkeypatch.setattr(sim, "BATCH_PATHS", 2)
    b = simulate_paths(spec, sol, Feedback(sol), 5, 3, seed=9)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.costs, b.costs)
    c = simulate_paths(spec, sol, Feedback(sol), 5, 3, seed=10)
    assert not np.array_equal(a.X, c.X)


def test_xbar_shared_within_common_path(systemic_small):
    spec, sol = systemic_small
    ens = simulate_paths(spec, sol, Feedback(sol), 2, 3, seed=0)
    assert ens.Xbar.shape == (2, 21, 4, 1) and ens.X.shape == (2, 3, 21, 4, 1)
    assert ens.controls.shape == (2, 3, 20, 4, 1)
    assert np.all(np.isfinite(ens.costs))


def test_noise_independent_across_labels_and_paths():
    spec = zero_spec(LabelGrid(4), TimeGrid(0, 1, 200))
    nz = draw_noise(spec, 0, range(20), 50)
    dW = nz.dW.reshape(-1, 4) / np.sqrt(spec.tgrid.dt)
    corr = np.corrcoef(dW.T)
    assert np.max(np.abs(corr - np.eye(4))) < 0.02
    assert abs(nz.dB0.std() / np.sqrt(spec.tgrid.dt) - 1) < 0.05


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_reports_knot():
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 1, 50), A=1e8, xi_mean=1.0)
    with pytest.raises(SimulationError, match="knot"):
        simulate_paths(spec, None, OpenLoopField(np.zeros((2, 1))), 1, 1, 0)


# --- costs ------------------------------------------------------------------

def test_zero_cost():
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 1, 4), R=1.0, xi_cov=1.0)
    ens = simulate_paths(spec, None, OpenLoopField(np.zeros((2, 1))), 3, 2, 0)
    est = estimate_cost(spec, ens)
    assert est.mean == 0.0 and est.std_error == 0.0 and est.n_samples == 6


def test_deterministic_cost_quadrature():
    a, x0 = 0.5, 2.0
    n = 10
    spec = zero_spec(LabelGrid(2), TimeGrid(0, 1, n), B=1.0, Q=1.0, H=3.0, xi_mean=x0)
    ens = simulate_paths(spec, None, OpenLoopField(np.full((2, 1), a)), 2, 3, 0)
    est = estimate_cost(spec, ens)
    dt = 1 / n
    xs = x0 + a * dt * np.arange(n + 1)
    expected = dt * np.sum(xs[:-1] ** 2 + a ** 2) + 3.0 * xs[-1] ** 2
    assert est.std_error == 0.0
    assert est.mean == pytest.approx(expected, rel=1e-13)
    assert sum(est.breakdown.values()) == pytest.approx(est.mean, rel=1e-13)


def test_estimate_matches_streamed_costs(systemic_small):
    spec, sol = systemic_small
    ens = simulate_paths(spec, sol, Feedback(sol), 4, 3, seed=5)
    streamed, = sample_costs(spec, [Feedback(sol)], 4, 3, seed=5)
    est = estimate_cost(spec, ens)
    assert np.allclose(ens.costs.sum(-1), streamed, rtol=1e-13)
    assert est.mean == pytest.approx(streamed.mean(), rel=1e-12)
    assert est.std_error >= 0


def test_cost_close_to_value(systemic_small):
    spec, sol = systemic_small
    ens = simulate_paths(spec, sol, Feedback(sol), 200, 10, seed=1)
    est = estimate_cost(spec, ens)
    assert abs(est.mean - value_function(sol, spec)) <= 3 * est.std_error + 0.01 * value_function(sol, spec)


def test_weak_error_first_order():
    """Deterministic sub-problem: |J_hat - V| roughly halves when dt halves."""
    errs = []
    for n in (40, 80, 160):
        spec = build_systemic(SystemicParams(n_labels=4, n_steps=n, sigma=0.0, xi_mean=[1.0, 0.5, -0.5, 0.2],
                                             G_kappa={"name": "exp", "length": 0.5}))
        sol = solve_backward(spec)
        cost, = sample_costs(spec, [Feedback(sol)], 1, 1, seed=0)
        errs.append(abs(cost[0, 0] - value_function(sol, spec)))
    assert 1.7 < errs[0] / errs[1] < 2.3 and 1.7 < errs[1] / errs[2] < 2.3


# --- fundamental relation ---------------------------------------------------

def test_relation_eps_zero_and_delta_zero(systemic_small):
    spec, sol = systemic_small
    rep = fundamental_relation_residual(spec, sol, np.ones((4, 1)), 0.0, 20, 5, seed=3)
    assert rep["residual_b"] == rep["residual_a"] and rep["penalty"] == 0.0
    rep = fundamental_relation_residual(spec, sol, np.zeros((4, 1)), 0.1, 20, 5, seed=3)
    assert rep["residual_b"] == rep["residual_a"]
    assert rep["residual_c"] == 0.0 and rep["residual_b_crn"] == 0.0


def test_relation_small_run(systemic_small):
    spec, sol = systemic_small
    rep = fundamental_relation_residual(spec, sol, np.ones((4, 1)), 0.1, 200, 10, seed=11, extra_eps=(0.2,))
    assert abs(rep["residual_b_crn"]) <= 3 * rep["se_b_crn"]
    assert abs(rep["residual_c"]) <= 3 * rep["se_c"]
    assert rep["excess_eps"] > 0 and rep["excess_eps_0.2"] > rep["excess_eps"]


@settings(max_examples=10, deadline=None)
@given(eps=st.floats(0.01, 1.0), scale=st.floats(-2, 2).filter(lambda s: abs(s) > 1e-3))
def test_penalty_is_quadratic(eps, scale):
    spec = build_trading(TradingParams(n_labels=3, n_steps=10))
    sol = solve_backward(spec)
    base = quadratic_penalty(spec, sol, np.ones((3, 1)), 1.0)
    assert quadratic_penalty(spec, sol, scale * np.ones((3, 1)), eps) == pytest.approx(base * (eps * scale) ** 2)


def test_penalty_trading_is_exact_control_cost():
    # with R = 1 and D = 0, O = 1 so the penalty is eps^2 * T * mean(delta^2)
    spec = build_trading(TradingParams(n_labels=4, n_steps=10, T=2.0))
    sol = solve_backward(spec)
    delta = np.array([1.0, -1.0, 2.0, 0.0])[:, None]
    assert quadratic_penalty(spec, sol, delta, 0.1) == pytest.approx(0.01 * 2.0 * np.mean(delta ** 2))


def test_report_json_flat(tmp_path, systemic_small):
    spec, sol = systemic_small
    rep = fundamental_relation_residual(spec, sol, np.ones((4, 1)), 0.1, 5, 2, seed=1)
    path = write_report(rep, tmp_path / "r.json", {"config_hash": "abc"})
    doc = json.loads(path.read_text())
    for key in ("J_hat", "V", "residual_a", "residual_b", "residual_c", "se_a", "se_b", "se_c"):
        assert key in doc
    assert all(not isinstance(v, (dict, list)) for v in doc.values())


def test_trajectory_quantiles(systemic_small):
    spec, sol = systemic_small
    ens = simulate_paths(spec, sol, Feedback(sol), 4, 5, seed=2)
    rows = trajectory_quantiles(ens)
    assert len(rows) == 21 * 4 + 20 * 4
    for t, i, name, mean, lo, hi in rows:
        assert lo <= hi


def test_cost_estimate_fields():
    est = CostEstimate(1.0, 0.1, 10, {"a": 0.4, "b": 0.6})
    assert est.std_error >= 0 and sum(est.breakdown.values()) == pytest.approx(est.mean)
