import numpy as np
import pytest

from backend.bsde import SolutionEnsemble
from backend.certificates import make_ledger
from backend.errors import InvalidArgument
from backend.estimates import (
    assumption_from_h4,
    estimate_table,
    lemma2_check,
    prop1_report,
    prop2_report,
    remark1_bound,
)
from backend.generators import Descriptors, Generator, zoo
from backend.moduli import linear
from backend.modulus import separable, zero_time_modulus
from backend.paths import build_grid, simulate_brownian
from backend.quadrature import ONE, ZERO


def brownian_solution(M, P, seed=0, scale=1.0):
    """Y = scale * B, Z = scale: the exact discrete solution for g = 0 and xi = scale * B_T."""
    grid = build_grid(1.0, M)
    ens = simulate_brownian(grid, 1, P, seed)
    sol = SolutionEnsemble(scale * np.array(ens.values), np.full((M + 1, P, 1, 1), scale), grid, ens)
    return sol, scale * np.array(ens.values[-1])


def constant_solution(M=20, P=100):
    grid = build_grid(1.0, M)
    ens = simulate_brownian(grid, 1, P, 0)
    return SolutionEnsemble(np.ones((M + 1, P, 1)), np.zeros((M + 1, P, 1, 1)), grid, ens), np.ones((P, 1))


def test_pathwise_inequality_on_the_exact_solution():
    sol, xi = brownian_solution(100, 2000)
    report = lemma2_check(sol, xi, zoo("zero"), 2.0)
    assert report.c_p == 1.0
    assert len(report.pass_fraction) == 101
    assert report.min_fraction >= 0.99
    assert report.pass_fraction[-1] == 1.0


@pytest.mark.slow
def test_pathwise_pass_fraction_does_not_drop_on_finer_grids():
    fractions = []
    for M in (100, 300, 1000):
        sol, xi = brownian_solution(M, 10_000, seed=1)
        fractions.append(lemma2_check(sol, xi, zoo("zero"), 2.0).min_fraction)
    assert fractions[-1] >= 0.99
    assert fractions[0] <= fractions[1] <= fractions[2]


def test_pathwise_inequality_for_p_below_two():
    sol, xi = constant_solution()
    report = lemma2_check(sol, xi, zoo("zero"), 1.5)
    assert report.c_p == pytest.approx(0.375)
    assert report.min_fraction == 1.0
    with pytest.raises(InvalidArgument):
        lemma2_check(sol, xi, zoo("zero"), 1.0)


def test_assumption_from_the_zero_generator():
    sol, _ = constant_solution()
    assumption = assumption_from_h4(zoo("zero"), sol, 2.0)
    assert np.all(assumption.phi == 0.0)
    assert np.all(assumption.f == 0.0)
    assert assumption.phi.shape == (21, 100)
    blank = Generator("blank", 1, 1, lambda t, y, z, b: y, Descriptors())
    with pytest.raises(InvalidArgument):
        assumption_from_h4(blank, sol, 2.0)


def test_constant_solution_reports():
    sol, xi = constant_solution()
    g = zoo("zero")
    assumption = assumption_from_h4(g, sol, 2.0)
    ledger = make_ledger(2.0)
    first = prop1_report(sol, xi, assumption, 0, ledger)
    assert first.name == "prop1"
    assert first.lhs == 0.0 and first.fitted_constant == 0.0
    assert first.rhs_total == pytest.approx(2.0)
    assert first.pass_at_ledger
    assert len(first.notes) == 1
    second = prop2_report(sol, xi, assumption, 10, ledger)
    assert second.t == pytest.approx(0.5)
    assert second.lhs == pytest.approx(1.0)
    assert second.fitted_constant == pytest.approx(1.0)
    assert second.rhs_shape["K_t"] == pytest.approx(1.0)
    assert second.pass_at_ledger
    with pytest.raises(InvalidArgument):
        prop2_report(sol, xi, assumption, 21, ledger)


def test_fitted_constants_are_scale_free():
    g = zoo("zero")
    ledger = make_ledger(2.0)
    fitted = []
    for scale in (1.0, 3.0):
        sol, xi = brownian_solution(40, 500, seed=2, scale=scale)
        assumption = assumption_from_h4(g, sol, 2.0)
        fitted.append(
            (
                prop1_report(sol, xi, assumption, 0, ledger).fitted_constant,
                prop2_report(sol, xi, assumption, 0, ledger).fitted_constant,
            )
        )
    np.testing.assert_allclose(fitted[0], fitted[1], rtol=1e-10)


def test_remark1_bound_cases():
    grid = build_grid(2.0, 40)
    constant = np.full((41, 50), 2.0)
    equality = remark1_bound(separable(ONE, linear(1.0), ZERO, ONE), constant, 2.0, grid=grid)
    assert equality.lhs == pytest.approx(8.0)
    assert equality.rhs == pytest.approx(8.0)
    assert equality.holds
    assert remark1_bound(zero_time_modulus(), constant, 2.0, grid=grid).lhs == 0.0
    with pytest.raises(InvalidArgument):
        remark1_bound(zero_time_modulus(), constant, 2.0)


def test_remark1_bound_flags_a_wrong_envelope():
    sol, _ = brownian_solution(50, 1000, seed=3)
    report = remark1_bound(separable(ONE, linear(1.0), ZERO, ZERO), sol, 2.0)
    assert report.rhs == 0.0
    assert report.lhs == pytest.approx(0.5, rel=0.15)
    assert not report.holds


def test_estimate_table_rows():
    sol, xi = constant_solution()
    g = zoo("zero")
    assumption = assumption_from_h4(g, sol, 2.0)
    ledger = make_ledger(2.0)
    reports = [prop1_report(sol, xi, assumption, 0, ledger), prop2_report(sol, xi, assumption, 0, ledger)]
    table = estimate_table({"remark7": reports})
    assert list(table.columns) == ["benchmark", "estimate", "t", "lhs", "rhs", "fitted_constant", "pass"]
    assert table["estimate"].tolist() == ["prop1", "prop2"]
    assert table["pass"].all()
    assert estimate_table([("remark7", reports[0])]).shape == (1, 7)
    assert estimate_table([]).empty
