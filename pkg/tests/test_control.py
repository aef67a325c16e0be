from dataclasses import replace

import numpy as np
import pytest
from scipy.integrate import quad

from instances import noisy_tanh_spec, random_spec, sech_spec, tanh_spec
from rlq.adjoint import solve_adjoint_ode
from rlq.chain import occupation_probabilities
from rlq.control import build_policy, optimal_value, original_control_policy
from rlq.errors import GridMismatch, SingularInnerMatrix
from rlq.grid import TimeGrid
from rlq.problem import ProblemSpec, reduce_cross_term
from rlq.riccati import solve_riccati_ode


def pipeline(spec, N=200):
    grid = TimeGrid(spec.T, N)
    ric = solve_riccati_ode(spec, grid)
    adj = solve_adjoint_ode(spec, ric)
    occ = occupation_probabilities(spec.generator, spec.i0, grid)
    return ric, adj, build_policy(ric, adj, spec), optimal_value(spec, ric, adj, occ)


def test_homogeneous_policy_is_linear_and_value_quadratic():
    rng = np.random.default_rng(0)
    spec = random_spec(rng, 3, 2, 2, offsets=False)
    ric, adj, pol, val = pipeline(spec, 100)
    assert np.all(pol.phi == 0)
    x = spec.x
    assert val.V == pytest.approx(x @ ric.P[0, spec.i0] @ x, abs=1e-10)
    assert all(v == 0 for k, v in val.terms.items() if k != "quadratic")


def test_tanh_gain_and_value():
    ric, _, pol, val = pipeline(tanh_spec())
    assert pol.Gamma[0, 0, 0, 0] == pytest.approx(np.tanh(1.0), abs=1e-8)
    np.testing.assert_array_equal(pol.Gamma, ric.Gamma)
    assert val.V == pytest.approx(0.7615942, abs=1e-6)


def test_noisy_tanh_value():
    _, _, _, val = pipeline(noisy_tanh_spec(0.5))
    assert val.V == pytest.approx(np.tanh(1.0) + 0.25 * np.log(np.cosh(1.0)), abs=1e-6)


def test_sech_value_by_quadrature():
    _, adj, _, val = pipeline(sech_spec())
    K = lambda s: 1 / np.cosh(1 - s) - 1
    expected = (np.tanh(1.0) - 2 * K(0.0) - 2 * quad(K, 0, 1, epsabs=1e-13)[0]
                - quad(lambda s: K(s) ** 2, 0, 1, epsabs=1e-13)[0])
    # time integrals use the composite trapezoid rule: second order in the step
    assert val.V == pytest.approx(expected, abs=1e-5)
    assert val.terms["linear"] == pytest.approx(-2 * adj.K[0, 0, 0])
    err = [abs(pipeline(sech_spec(), N)[3].V - expected) for N in (50, 100)]
    assert 3.5 <= err[0] / err[1] <= 4.5


def test_gain_without_control_noise():
    rng = np.random.default_rng(1)
    spec = random_spec(rng, 2, 2, 2)
    spec = replace(spec, coefficients=tuple(replace(c, D=type(c.D).zeros((2, 2))) for c in spec.coefficients))
    ric, _, pol, _ = pipeline(spec, 50)
    t = ric.grid.nodes
    B, R = spec.tabulate("B", t), spec.tabulate("R", t)
    expected = np.linalg.solve(R, np.swapaxes(B, -1, -2) @ ric.P)
    np.testing.assert_allclose(pol.Gamma, expected, atol=1e-12)


def test_value_terms_sum():
    rng = np.random.default_rng(2)
    for _ in range(5):
        spec = random_spec(rng, 2, 1, 3, time_varying=True)
        _, _, _, val = pipeline(spec, 80)
        assert abs(val.V - val.total()) <= 1e-10
        assert val.terms["completed_square"] <= 0


def test_policy_affine_in_state():
    rng = np.random.default_rng(3)
    spec = random_spec(rng, 3, 2, 2)
    _, _, pol, _ = pipeline(spec, 40)
    X1, X2 = rng.normal(size=3), rng.normal(size=3)
    for a in (-0.5, 0.3, 2.0):
        lhs = pol(0.41, a * X1 + (1 - a) * X2, 1)
        rhs = a * pol(0.41, X1, 1) + (1 - a) * pol(0.41, X2, 1)
        np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_policy_uses_left_node():
    _, _, pol, _ = pipeline(sech_spec(), 10)
    X = np.array([0.8])
    k = 3
    between = pol.grid.nodes[k] + 0.7 * pol.grid.h
    np.testing.assert_array_equal(pol(between, X, 0), -pol.Gamma[k, 0] @ X + pol.phi[k, 0])
    np.testing.assert_array_equal(pol(pol.grid.nodes[k + 1], X, 0), -pol.Gamma[k + 1, 0] @ X + pol.phi[k + 1, 0])


def test_policy_resampled_on_refining_grid():
    _, _, pol, _ = pipeline(sech_spec(), 10)
    gain, offset, _ = pol.tables_on(TimeGrid(1.0, 40))
    np.testing.assert_array_equal(gain[4 * 3 + 2], pol.Gamma[3])
    with pytest.raises(GridMismatch):
        pol.tables_on(TimeGrid(1.0, 15))


def test_grid_mismatch():
    spec = sech_spec()
    ric = solve_riccati_ode(spec, TimeGrid(1.0, 20))
    adj = solve_adjoint_ode(spec, solve_riccati_ode(spec, TimeGrid(1.0, 40)))
    with pytest.raises(GridMismatch):
        build_policy(ric, adj, spec)


def test_singular_inner_matrix():
    spec = sech_spec()
    ric = solve_riccati_ode(spec, TimeGrid(1.0, 20))
    adj = solve_adjoint_ode(spec, ric)
    with pytest.raises(SingularInnerMatrix):
        build_policy(ric, adj, sech_spec(R=0.0))


def test_cross_term_policy_maps_back():
    reg = dict(A=[[0.2]], B=[[1.0]], Q=[[2.0]], R=[[1.0]], S=[[0.5]], b=[0.3], q=[0.1], r=[0.2])
    spec = ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg], x=[1.0], lambda_min=0.5)
    red = reduce_cross_term(spec)
    _, _, pol, _ = pipeline(red, 50)
    orig = original_control_policy(pol, red)
    X = np.array([0.7])
    u_red = pol(0.3, X, 0)
    np.testing.assert_allclose(orig(0.3, X, 0), red.from_reduced_control(0.3, X, u_red, 0), atol=1e-14)
    assert original_control_policy(pol, spec) is pol
