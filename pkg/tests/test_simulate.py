import numpy as np
import pytest

from instances import noisy_tanh_spec, random_spec, scalar_spec, sech_spec
from rlq.adjoint import solve_adjoint_ode
from rlq.chain import occupation_probabilities
from rlq.control import build_policy, optimal_value
from rlq.errors import BlowUp
from rlq.grid import TimeGrid
from rlq.riccati import solve_riccati_ode
from rlq.simulate import (AffineControl, constant_deviation_penalty, cost_decomposition, estimate_cost,
                          perturbed, simulate_closed_loop)


def solved(spec, N=200):
    grid = TimeGrid(spec.T, N)
    ric = solve_riccati_ode(spec, grid)
    adj = solve_adjoint_ode(spec, ric)
    occ = occupation_probabilities(spec.generator, spec.i0, grid)
    return grid, ric, adj, build_policy(ric, adj, spec), optimal_value(spec, ric, adj, occ).V


def zero_control(spec, grid):
    return AffineControl(grid, np.zeros((grid.N + 1, spec.ell, spec.m, spec.n)),
                         np.zeros((grid.N + 1, spec.ell, spec.m)))


def as_callable(control):
    return lambda t, X, regimes, w: control(t, X, regimes)


def test_constant_state_cost_exact():
    spec = scalar_spec(A=0.0, B=0.0, Q=1.0, q=1.5, G=2.0, g=0.3, x=1.5)
    grid = TimeGrid(1.0, 50)
    batch = simulate_closed_loop(spec, zero_control(spec, grid), grid, 100, keep_paths=True)
    assert np.all(batch.states == 1.5)
    np.testing.assert_allclose(batch.costs, 2.0 * (1.5 - 0.3) ** 2, rtol=0, atol=1e-14)
    assert batch.stderr <= 1e-15


def test_state_starts_at_x():
    rng = np.random.default_rng(0)
    spec = random_spec(rng, 2, 1, 2)
    grid, _, _, pol, _ = solved(spec, 20)
    batch = estimate_cost(spec, as_callable(pol), grid, 500, keep_paths=True)
    np.testing.assert_array_equal(batch.states[:, 0], np.broadcast_to(spec.x, (500, 2)))


def test_exponential_growth():
    spec = scalar_spec(A=1.0, B=0.0, Q=0.0, x=1.0)
    errs = []
    for N in (100, 200):
        grid = TimeGrid(1.0, N)
        batch = simulate_closed_loop(spec, zero_control(spec, grid), grid, 10)
        errs.append(abs(batch.terminal_states[0, 0] - np.e))
        assert errs[-1] <= 2.0 / N
    assert errs[0] / errs[1] == pytest.approx(2.0, rel=0.05)


def test_control_at_target_costs_nothing():
    spec = scalar_spec(A=0.3, B=1.0, Q=0.0, R=2.0, r=0.7, sigma=0.4)
    grid = TimeGrid(1.0, 20)
    ctrl = AffineControl(grid, np.zeros((21, 1, 1, 1)), np.full((21, 1, 1), 0.7))
    batch = estimate_cost(spec, ctrl, grid, 2000)
    assert np.all(batch.costs == 0.0)


def test_no_diffusion_means_seed_independent():
    grid, _, _, pol, _ = solved(sech_spec(), 50)
    a = simulate_closed_loop(sech_spec(), pol, grid, 200, rng=1)
    b = simulate_closed_loop(sech_spec(), pol, grid, 200, rng=2)
    assert a.mean == b.mean


def test_seed_determinism_and_worker_independence():
    rng = np.random.default_rng(1)
    spec = random_spec(rng, 2, 1, 2)
    grid, _, _, pol, _ = solved(spec, 40)
    a = estimate_cost(spec, pol, grid, 20_000, rng=5, workers=1)
    b = estimate_cost(spec, pol, grid, 20_000, rng=5, workers=3)
    np.testing.assert_array_equal(a.costs, b.costs)
    c = estimate_cost(spec, pol, grid, 20_000, rng=6)
    assert a.mean != c.mean


def test_compiled_path_matches_general_path(backend):
    rng = np.random.default_rng(2)
    spec = random_spec(rng, 2, 2, 3)
    grid, _, _, pol, _ = solved(spec, 40)
    ctrl = perturbed(pol, delta=0.3, gain_delta=0.1)
    fast = estimate_cost(spec, ctrl, grid, 3000, rng=4, reference=pol)
    slow = estimate_cost(spec, as_callable(ctrl), grid, 3000, rng=4, reference=pol)
    np.testing.assert_allclose(fast.costs, slow.costs, rtol=1e-11, atol=1e-11)
    np.testing.assert_allclose(fast.penalties, slow.penalties, rtol=1e-11, atol=1e-11)


def test_policy_on_refined_simulation_grid():
    grid, _, _, pol, _ = solved(sech_spec(), 20)
    fine = TimeGrid(1.0, 80)
    fast = estimate_cost(sech_spec(), pol, fine, 10)
    slow = estimate_cost(sech_spec(), as_callable(pol), fine, 10)
    np.testing.assert_allclose(fast.costs, slow.costs, rtol=1e-12)


def test_stderr_definition():
    grid, _, _, pol, _ = solved(noisy_tanh_spec(), 20)
    batch = estimate_cost(noisy_tanh_spec(), pol, grid, 4000)
    assert batch.stderr == pytest.approx(batch.costs.std(ddof=1) / np.sqrt(4000))
    assert batch.ci99 == pytest.approx(2.5758293 * batch.stderr)


def test_blowup_raised():
    spec = scalar_spec(A=200.0, B=0.0, Q=0.0)
    grid = TimeGrid(1.0, 100)
    with pytest.raises(BlowUp):
        estimate_cost(spec, zero_control(spec, grid), grid, 100)
    with pytest.raises(BlowUp):
        estimate_cost(spec, as_callable(zero_control(spec, grid)), grid, 100)


def test_optimal_cost_matches_value():
    spec = noisy_tanh_spec(0.5)
    grid, _, _, pol, V = solved(spec)
    batch = simulate_closed_loop(spec, pol, grid, 100_000, rng=3)
    assert abs(batch.mean - V) <= 3 * batch.stderr + 1e-3  # Euler bias at N=200 is ~6e-4


def test_decomposition_equality_case():
    rng = np.random.default_rng(3)
    spec = random_spec(rng, 2, 1, 2)
    grid, ric, adj, pol, V = solved(spec)
    rep = cost_decomposition(spec, ric, adj, pol, pol, grid, 10_000, rng=1, value=V)
    assert rep.penalty == 0.0
    assert abs(rep.J - V) <= 3 * rep.J_stderr + 5e-3


def test_constant_shift_penalty_matches_quadrature():
    rng = np.random.default_rng(4)
    spec = random_spec(rng, 2, 2, 2)
    grid, ric, adj, pol, V = solved(spec)
    delta = np.array([0.4, -0.3])
    rep = cost_decomposition(spec, ric, adj, pol, perturbed(pol, delta=delta), grid, 10_000, rng=2, value=V)
    expected = constant_deviation_penalty(pol, spec, delta)
    # left-endpoint sum versus trapezoid: O(h) apart
    assert abs(rep.penalty - expected) <= 3 * rep.penalty_stderr + 2 * grid.h * expected


def test_decomposition_identity_random_controls():
    rng = np.random.default_rng(5)
    spec = random_spec(rng, 2, 1, 2)
    grid, ric, adj, pol, V = solved(spec)
    for k in range(5):
        ctrl = perturbed(pol, delta=rng.normal(scale=0.5, size=(1,)), gain_delta=rng.normal(scale=0.3, size=(1, 2)))
        rep = cost_decomposition(spec, ric, adj, pol, ctrl, grid, 10_000, rng=10 + k, value=V)
        assert rep.holds(3.0), (k, rep)
        assert rep.penalty > 0


def test_suboptimal_controls_cost_more():
    spec = noisy_tanh_spec(0.5)
    grid, _, _, pol, _ = solved(spec)
    best = estimate_cost(spec, pol, grid, 20_000, rng=1)
    for delta in (-0.5, 0.5):
        worse = estimate_cost(spec, perturbed(pol, delta=delta), grid, 20_000, rng=1)
        assert worse.mean >= best.mean - 3 * np.hypot(best.stderr, worse.stderr)
