from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from instances import random_spec, scalar_spec, sech_spec
from rlq.adjoint import solve_adjoint_ode
from rlq.chain import occupation_probabilities
from rlq.config import load_spec
from rlq.control import optimal_value
from rlq.errors import DegenerateDesign, GridMismatch
from rlq.grid import TimeGrid
from rlq.lsmc import (LSMCPolicy, RegressionBasis, dump_tables, load_tables, optimal_value_mc, psd_clip,
                      regress_conditional_expectation, simulate_brownian_grid, solve_adjoint_lsmc,
                      solve_sre_lsmc)
from rlq.problem import BROWNIAN, ProblemSpec
from rlq.riccati import solve_riccati_ode
from rlq.simulate import estimate_cost

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def as_random(spec):
    return replace(spec, randomness_mode=BROWNIAN)


def rms(a):
    return float(np.sqrt(np.mean(np.square(a))))


def lsmc_pair(spec, N, M, seed=0):
    bg = simulate_brownian_grid(TimeGrid(spec.T, N), M, seed)
    sre = solve_sre_lsmc(spec, bg)
    return bg, sre, solve_adjoint_lsmc(spec, sre, bg)


def quadratic_state_cost_spec(A=0.3):
    """B = C = D = 0 and Q = 1 + w^2: the Riccati equation is linear with a closed-form solution."""
    reg = dict(A=[[A]], B=[[0.0]], Q=[["1 + w*w"]], R=[[1.0]])
    return ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg], lambda_min=0.5, randomness_mode=BROWNIAN)


def quadratic_state_cost_oracle(t, w, A=0.3, T=1.0):
    """P(t, w) = int_t^T e^{2A(s-t)} E[1 + W_s^2 | W_t = w] ds and Lambda = dP/dw."""
    a, tau = 2 * A, T - t
    i1 = np.expm1(a * tau) / a
    i0 = i1 + tau * np.exp(a * tau) / a - np.expm1(a * tau) / a ** 2
    return i0 + i1 * w ** 2, 2 * i1 * w


# Brownian grid

def test_brownian_grid_moments_and_determinism():
    bg = simulate_brownian_grid(TimeGrid(1.0, 10), 100_000, rng=3)
    assert np.all(bg.values[:, 0] == 0)
    np.testing.assert_allclose(bg.values[:, 1:], np.cumsum(bg.increments, axis=1))
    W1 = bg.values[:, -1]
    assert abs(W1.mean()) <= 4 / np.sqrt(bg.paths)
    assert W1.var() == pytest.approx(1.0, rel=0.05)
    again = simulate_brownian_grid(TimeGrid(1.0, 10), 100_000, rng=3)
    np.testing.assert_array_equal(bg.values, again.values)


def test_brownian_grid_needs_two_paths():
    with pytest.raises(ValueError):
        simulate_brownian_grid(TimeGrid(1.0, 10), 1)


# regression

def test_constant_target():
    w = np.random.default_rng(0).normal(size=500)
    fit = regress_conditional_expectation(np.full(500, 2.5), w, RegressionBasis(3))
    np.testing.assert_allclose(fit.fitted, 2.5, atol=1e-12)


def test_conditional_second_moment():
    bg = simulate_brownian_grid(TimeGrid(1.0, 4), 100_000, rng=1)
    for k in (1, 2, 3):
        t = bg.grid.nodes[k]
        w = bg.values[:, k]
        fit = regress_conditional_expectation(bg.values[:, -1] ** 2, w, RegressionBasis(2))
        truth = w ** 2 + (1.0 - t)
        assert rms(fit.fitted - truth) <= 0.02 * rms(truth)


def test_underdetermined_design():
    with pytest.raises(DegenerateDesign):
        regress_conditional_expectation(np.ones(3), np.array([0.1, 0.2, 0.3]), RegressionBasis(5))


def test_collinear_design():
    w = np.array([1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 2.0])
    with pytest.raises(DegenerateDesign):
        regress_conditional_expectation(np.ones(8), w, RegressionBasis(5), ridge=0.0)


def test_zero_spread_fits_mean():
    fit = regress_conditional_expectation(np.arange(10.0), np.zeros(10), RegressionBasis(3))
    np.testing.assert_allclose(fit.fitted, 4.5)


def test_psd_clip():
    P = np.array([[[1.0, 0.0], [0.0, -0.5]], [[2.0, 0.0], [0.0, 1.0]]])
    out, change = psd_clip(P)
    np.testing.assert_allclose(out[0], np.diag([1.0, 0.0]), atol=1e-15)
    np.testing.assert_allclose(out[1], P[1])
    np.testing.assert_allclose(change, [0.5, 0.0], atol=1e-15)


# Riccati and adjoint by regression

def test_zero_solution():
    spec = as_random(scalar_spec(Q=0.0, G=0.0))
    bg = simulate_brownian_grid(TimeGrid(1.0, 10), 1000, 0)
    sre = solve_sre_lsmc(spec, bg)
    assert sre.iterations == 1
    assert np.all(sre.values == 0) and np.all(sre.martingale == 0)


def test_collapse_to_deterministic_solution():
    rng = np.random.default_rng(2)
    spec = random_spec(rng, 2, 1, 2)
    grid = TimeGrid(1.0, 25)
    ric = solve_riccati_ode(spec, grid)
    adj = solve_adjoint_ode(spec, ric)
    bg, sre, ladj = lsmc_pair(as_random(spec), 25, 10_000)
    assert rms(sre.values - ric.P[:, None]) <= 1e-2
    assert rms(sre.martingale) <= 1e-2
    assert rms(ladj.values - adj.K[:, None]) <= 1e-2
    assert rms(ladj.martingale) <= 1e-2
    assert sre.diagnostics["clip_fraction"] < 0.01
    sym = sre.values - np.swapaxes(sre.values, -1, -2)
    assert np.abs(sym).max() <= 1e-8


def test_sech_intercept():
    _, _, adj = lsmc_pair(as_random(sech_spec()), 50, 10_000)
    assert abs(adj.intercept(0)[0, 0] - (1 / np.cosh(1.0) - 1)) <= 1e-2


def test_random_state_cost_against_closed_form():
    spec = quadratic_state_cost_spec()
    bg, sre, _ = lsmc_pair(spec, 25, 10_000, seed=4)
    P, Lam = quadratic_state_cost_oracle(bg.grid.nodes[:, None], bg.values.T)
    # P grows like w^2, so the error is measured relative to the field's size
    assert rms(sre.values[..., 0, 0, 0] - P) <= 0.02 * rms(P)
    assert abs(sre.intercept(0)[0, 0, 0] - P[0, 0]) <= 0.01 * P[0, 0]
    assert rms(sre.martingale[:-1, :, 0, 0, 0] - Lam[:-1]) <= 0.15 * rms(Lam[:-1])


def test_more_paths_reduce_error():
    spec = quadratic_state_cost_spec()
    errs = []
    for M in (2_500, 10_000):
        bg, sre, _ = lsmc_pair(spec, 25, M, seed=4)
        P, _ = quadratic_state_cost_oracle(bg.grid.nodes[:, None], bg.values.T)
        errs.append(rms(sre.values[..., 0, 0, 0] - P))
    assert errs[0] / errs[1] >= 1.5


def test_raw_martingale_estimator_converges_with_paths():
    """Without the control variate, E[P_{k+1} dW | W_k] / h has pure Monte Carlo error."""
    rng = np.random.default_rng(6)
    spec = random_spec(rng, 2, 1, 1)
    errs = []
    for M in (10_000, 40_000):
        bg, sre, _ = lsmc_pair(as_random(spec), 10, M, seed=2)
        raw = []
        for k in range(bg.grid.N):
            target = sre.values[k + 1] * bg.increments[:, k, None, None, None]
            raw.append(regress_conditional_expectation(target, bg.values[:, k], RegressionBasis(3)).fitted / bg.grid.h)
        errs.append(rms(np.array(raw)))
    assert errs[0] / errs[1] >= 1.5


def test_seed_determinism():
    spec = as_random(sech_spec(sigma=0.3))
    a = lsmc_pair(spec, 10, 2000, seed=9)
    b = lsmc_pair(spec, 10, 2000, seed=9)
    np.testing.assert_array_equal(a[1].values, b[1].values)
    np.testing.assert_array_equal(a[2].coef_values, b[2].coef_values)


def test_evaluate_reproduces_fitted_values():
    spec = quadratic_state_cost_spec()
    bg, sre, _ = lsmc_pair(spec, 10, 2000)
    k = 4
    np.testing.assert_allclose(sre.evaluate(k, bg.values[:, k]), sre.values[k], rtol=1e-10, atol=1e-12)


def test_adjoint_grid_mismatch():
    spec = as_random(sech_spec())
    bg, sre, _ = lsmc_pair(spec, 10, 500)
    other = simulate_brownian_grid(TimeGrid(1.0, 20), 500)
    with pytest.raises(GridMismatch):
        solve_adjoint_lsmc(spec, sre, other)


def test_table_dump_round_trip(tmp_path):
    spec = load_brownian_spec()
    bg, sre, adj = lsmc_pair(spec, 10, 2000)
    for sol in (sre, adj):
        path = tmp_path / f"{sol.kind}.rlq"
        dump_tables(sol, path)
        assert path.read_bytes()[:4] == b"RLQ1"
        back = load_tables(path)
        assert back["N"] == 10 and back["ell"] == 2 and back["degree"] == 3
        np.testing.assert_array_equal(back["coef_values"], sol.coef_values)
        np.testing.assert_array_equal(back["coef_martingale"], sol.coef_martingale)
        np.testing.assert_array_equal(back["centers"], sol.centers)


# value and policy

def load_brownian_spec():
    return load_spec(CONFIGS / "brownian.toml")


def test_value_mc_matches_formula_for_deterministic_coefficients():
    rng = np.random.default_rng(8)
    spec = random_spec(rng, 1, 1, 2, x=[0.8])
    grid = TimeGrid(1.0, 25)
    ric = solve_riccati_ode(spec, grid)
    adj = solve_adjoint_ode(spec, ric)
    exact = optimal_value(spec, ric, adj, occupation_probabilities(spec.generator, spec.i0, grid)).V
    bg, sre, ladj = lsmc_pair(as_random(spec), 25, 10_000)
    est = optimal_value_mc(as_random(spec), sre, ladj, bg, rng=1)
    assert abs(est.V - exact) <= 3 * est.terms["stderr"] + 1e-3


def test_value_mc_homogeneous():
    spec = as_random(scalar_spec(A=0.2, C=0.1, D=0.3, G=0.5, x=1.3))
    bg, sre, adj = lsmc_pair(spec, 20, 2000)
    est = optimal_value_mc(spec, sre, adj, bg)
    assert est.V == pytest.approx(1.3 ** 2 * sre.intercept(0)[0, 0, 0], abs=1e-10)


def test_value_mc_short_horizon():
    spec = as_random(scalar_spec(G=2.0, g=0.5, x=1.0, T=1e-6, b=1.0, sigma=1.0))
    bg, sre, adj = lsmc_pair(spec, 1, 200)
    est = optimal_value_mc(spec, sre, adj, bg)
    assert est.V == pytest.approx(2.0 * 1.0 - 2 * 2.0 * 0.5 + 2.0 * 0.25, abs=1e-4)


def test_lsmc_policy_cost_matches_value():
    spec = load_brownian_spec()
    bg, sre, adj = lsmc_pair(spec, 50, 10_000, seed=1)
    est = optimal_value_mc(spec, sre, adj, bg, rng=1)
    policy = LSMCPolicy(spec, sre, adj)
    batch = estimate_cost(spec, policy, bg.grid, 20_000, rng=7)
    pooled = np.hypot(batch.stderr, est.terms["stderr"])
    assert abs(batch.mean - est.V) <= 3 * pooled + 0.01
