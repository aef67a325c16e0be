import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from instances import random_spec, scalar_spec
from rlq.config import dumps_spec, load_spec, loads_spec, write_spec
from rlq.errors import DimensionError, IndefiniteReducedQ, ParseError, SchemaError, SingularR
from rlq.grid import TimeGrid
from rlq.problem import ProblemSpec, reduce_cross_term, validate_spec

MINIMAL = """
[problem]
n = 1
m = 1
ell = 1
T = 1.0
x = [1.0]
lambda_min = 0.5

[regime.1]
A = [[0.0]]
B = [[1.0]]
Q = [[1.0]]
R = [[1.0]]
"""


def test_valid_scalar_spec_has_empty_report():
    assert validate_spec(scalar_spec(), TimeGrid(1.0, 50)).ok


def test_zero_R_reported_with_time_and_regime():
    report = validate_spec(scalar_spec(R=0.0), TimeGrid(1.0, 50))
    assert not report.ok
    assert any("R below lambda_min at t=0, regime 1" in m for m in report.messages())


def test_bad_generator_row_named():
    reg = dict(A=[[0.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]])
    spec = ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg, reg], generator=[[-1.0, 0.5], [1.0, -1.0]],
                             lambda_min=0.5)
    msgs = validate_spec(spec).messages()
    assert any("generator row 1 sums to -0.5" in m for m in msgs)
    assert not any("row 2" in m for m in msgs)


def test_negative_off_diagonal_rate_reported():
    reg = dict(A=[[0.0]], B=[[1.0]], Q=[[1.0]], R=[[1.0]])
    spec = ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg, reg], generator=[[0.5, -0.5], [1.0, -1.0]],
                             lambda_min=0.5)
    assert any("negative" in m for m in validate_spec(spec).messages())


def test_indefinite_Q_and_G_reported():
    assert not validate_spec(scalar_spec(Q=-1.0)).ok
    assert not validate_spec(scalar_spec(G=-0.1)).ok


def test_every_violation_listed_without_raising():
    report = validate_spec(scalar_spec(Q=-1.0, R=0.0, G=-1.0))
    assert len(report) >= 3


def test_nonfinite_coefficient_reported():
    reg = dict(A=[["1/(t - 0.5)"]], B=[[1.0]], Q=[[1.0]], R=[[1.0]])
    spec = ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg], lambda_min=0.5)
    with np.errstate(divide="ignore"):
        assert not validate_spec(spec, TimeGrid(1.0, 10)).ok


def test_symmetrised_on_ingestion():
    reg = dict(A=[[0.0, 0.0], [0.0, 0.0]], B=[[1.0], [0.0]], Q=[[1.0, 0.2], [0.0, 1.0]], R=[[1.0]])
    spec = ProblemSpec.build(n=2, m=1, T=1.0, regimes=[reg], lambda_min=0.5)
    Q = spec.coefficients[0].Q(0.3)
    np.testing.assert_array_equal(Q, Q.T)
    assert Q[0, 1] == pytest.approx(0.1)


# cross-term elimination

def _with_cross(A=1.0, B=1.0, R=2.0, S=1.0, Q=3.0, C=0.2, D=0.5, q=0.3, r=-0.2):
    reg = dict(A=[[A]], B=[[B]], C=[[C]], D=[[D]], Q=[[Q]], R=[[R]], S=[[S]], q=[q], r=[r])
    return ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg], lambda_min=0.5)


def test_reduction_scalar_substitution():
    red = reduce_cross_term(_with_cross())
    c = red.coefficients[0]
    assert c.S is None
    assert c.A(0.0)[0, 0] == pytest.approx(0.5)
    assert c.C(0.0)[0, 0] == pytest.approx(0.2 - 0.5 * 0.5)
    assert c.Q(0.0)[0, 0] == pytest.approx(3.0 - 0.5)
    assert c.r(0.0)[0] == pytest.approx(-0.2 + 0.5 * 0.3)


def test_reduction_without_cross_term_is_identity():
    spec = scalar_spec()
    assert reduce_cross_term(spec) is spec


def test_reduction_idempotent():
    once = reduce_cross_term(_with_cross())
    twice = reduce_cross_term(once)
    for name in ("A", "C", "Q", "R", "q", "r"):
        assert getattr(twice.coefficients[0], name)(0.4) == pytest.approx(getattr(once.coefficients[0], name)(0.4))


def test_reduction_singular_R():
    with pytest.raises(SingularR):
        reduce_cross_term(_with_cross(R=0.0))


def test_reduction_indefinite_Q():
    with pytest.raises(IndefiniteReducedQ):
        reduce_cross_term(_with_cross(Q=0.1, S=1.0, R=1.0))


def _check_pointwise_identity(spec, rng, count):
    red = reduce_cross_term(spec)
    t = rng.uniform(0, spec.T, count)
    X = rng.normal(size=(count, spec.n)) * 3
    u = rng.normal(size=(count, spec.m)) * 3
    worst = 0.0
    for k in range(count):
        orig = spec.coefficients[0].running_cost(t[k], X[k], u[k])
        ut = red.to_reduced_control(t[k], X[k], u[k], 0)
        new = red.coefficients[0].running_cost(t[k], X[k], ut)
        worst = max(worst, abs(orig - new) / max(1.0, abs(orig)))
    return worst


def test_reduction_pointwise_cost_identity_scalar():
    rng = np.random.default_rng(3)
    spec = _with_cross(A=rng.normal(), R=1.7, S=0.6, Q=2.0, q=rng.normal(), r=rng.normal())
    assert _check_pointwise_identity(spec, rng, 1000) <= 1e-12


def test_reduction_time_varying_cross_term():
    reg = dict(A=[[0.1]], B=[[1.0]], Q=[["2 + sin(t)"]], R=[["1 + t"]], S=[["0.5*cos(t)"]], q=[0.3], r=[0.1])
    spec = ProblemSpec.build(n=1, m=1, T=1.0, regimes=[reg], lambda_min=0.5)
    rng = np.random.default_rng(4)
    assert _check_pointwise_identity(spec, rng, 200) <= 1e-12
    red = reduce_cross_term(spec)
    t = 0.7
    assert red.coefficients[0].A(t)[0, 0] == pytest.approx(0.1 - 0.5 * np.cos(t) / (1 + t))


def test_round_trip_controls():
    spec = reduce_cross_term(_with_cross())
    X, u = np.array([0.7]), np.array([-1.2])
    back = spec.from_reduced_control(0.2, X, spec.to_reduced_control(0.2, X, u, 0), 0)
    np.testing.assert_allclose(back, u, rtol=0, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 3), st.integers(1, 3))
def test_reduction_identity_property(seed, n, m):
    rng = np.random.default_rng(seed)
    S = rng.normal(scale=0.3, size=(m, n))
    R = np.eye(m) + 0.1 * np.ones((m, m))
    Q = S.T @ np.linalg.solve(R, S) + np.eye(n) * 0.1
    reg = dict(A=rng.normal(size=(n, n)), B=rng.normal(size=(n, m)), Q=Q, R=R, S=S,
               q=rng.normal(size=n), r=rng.normal(size=m))
    spec = ProblemSpec.build(n=n, m=m, T=1.0, regimes=[reg], lambda_min=0.5)
    red = reduce_cross_term(spec)
    X, u = rng.normal(size=(50, n)), rng.normal(size=(50, m))
    orig = spec.coefficients[0].running_cost(0.5, X, u)
    new = red.coefficients[0].running_cost(0.5, X, red.to_reduced_control(0.5, X, u, 0))
    np.testing.assert_allclose(new, orig, rtol=1e-12, atol=1e-12)


# config files

def test_minimal_config():
    spec = loads_spec(MINIMAL)
    assert (spec.n, spec.m, spec.ell) == (1, 1, 1)
    assert spec.i0 == 0


def test_bad_matrix_literal():
    bad = MINIMAL.replace("n = 1", "n = 2").replace("x = [1.0]", "x = [1.0, 0.0]").replace(
        "A = [[0.0]]", "A = [[0.0, 1.0], [2.0]]").replace("B = [[1.0]]", "B = [[1.0], [0.0]]").replace(
        "Q = [[1.0]]", "Q = [[1.0, 0.0], [0.0, 1.0]]")
    with pytest.raises(DimensionError):
        loads_spec(bad)


def test_expression_coefficient():
    spec = loads_spec(MINIMAL.replace('A = [[0.0]]', 'A = [["1 + 0.5*t"]]'))
    assert spec.coefficients[0].A(0.5)[0, 0] == pytest.approx(1.25)


def test_parse_error_has_field():
    with pytest.raises(ParseError) as err:
        loads_spec(MINIMAL.replace('A = [[0.0]]', 'A = [["1 + * t"]]'))
    assert "A" in str(err.value)
    with pytest.raises(ParseError):
        loads_spec(MINIMAL.replace("[regime.1]", "[regime.1"))


def test_unknown_function_rejected():
    with pytest.raises(ParseError):
        loads_spec(MINIMAL.replace('A = [[0.0]]', 'A = [["log(t)"]]'))


def test_missing_required_field():
    with pytest.raises(SchemaError):
        loads_spec(MINIMAL.replace("T = 1.0\n", ""))


def test_w_in_deterministic_mode_reported():
    spec = loads_spec(MINIMAL.replace('A = [[0.0]]', 'A = [["w"]]'))
    assert not validate_spec(spec).ok


def test_config_round_trip_preserves_validation(tmp_path):
    rng = np.random.default_rng(7)
    for k in range(5):
        spec = random_spec(rng, 2, 1, 2, time_varying=bool(k % 2))
        path = tmp_path / f"spec{k}.toml"
        write_spec(spec, path)
        again = load_spec(path)
        grid = TimeGrid(1.0, 40)
        assert validate_spec(again, grid).messages() == validate_spec(spec, grid).messages()
        for name in ("A", "R", "sigma"):
            np.testing.assert_allclose(again.tabulate(name, grid.nodes), spec.tabulate(name, grid.nodes),
                                       rtol=0, atol=1e-15)


def test_round_trip_of_invalid_spec_keeps_report():
    spec = scalar_spec(R=0.0)
    again = loads_spec(dumps_spec(spec))
    assert validate_spec(again).messages() == validate_spec(spec).messages()
