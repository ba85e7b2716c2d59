import math

import numpy as np
import pytest

from backend.bsde import (
    RegressionBasis,
    SolutionEnsemble,
    conditional_expectation,
    empirical_mp_norm,
    empirical_sp_norm,
    picard_solve,
    residual_check,
    solution_summary,
    solve_inner,
    uniqueness_probe,
)
from backend.certificates import compute_partition, constant_M, make_ledger, majorant_sequence
from backend.errors import DivergenceError, InvalidArgument
from backend.generators import Descriptors, Generator, check_H5, translate_hypotheses, zoo
from backend.moduli import linear
from backend.modulus import separable
from backend.paths import build_grid, simulate_brownian
from backend.quadrature import ONE
from backend.terminals import make_terminal


def ensemble(T=1.0, M=50, P=1000, seed=0, d=1):
    grid = build_grid(T, M)
    return grid, simulate_brownian(grid, d, P, seed)


def test_constant_values_are_returned_unchanged():
    grid, ens = ensemble(P=200)
    values = np.full((200, 1), 3.0)
    fit = conditional_expectation(values, RegressionBasis(degree=3), float(grid.points[10]), ens.values[10])
    assert np.array_equal(fit.fitted, values)


def test_values_in_the_span_are_reproduced():
    grid, ens = ensemble(P=500)
    t, b = float(grid.points[20]), ens.values[20]
    values = 2.0 - b + b**2
    fit = conditional_expectation(values, RegressionBasis(degree=2), t, b)
    np.testing.assert_allclose(fit.fitted, values, atol=1e-9)
    assert fit.rank == 3 and fit.ridge == 0.0


def test_regression_recovers_martingale_and_square():
    grid, ens = ensemble(P=20_000, seed=5)
    i = 25
    t, b, dt = float(grid.points[i]), ens.values[i], float(grid.steps[i])
    following = ens.values[i + 1]
    fit = conditional_expectation(following, RegressionBasis(degree=1), t, b)
    assert np.max(np.abs(fit.fitted - b)) < 0.05
    fit = conditional_expectation(following**2, RegressionBasis(degree=2), t, b)
    assert np.mean(np.abs(fit.fitted - (b**2 + dt))) < 0.02


def test_regression_needs_enough_paths():
    grid, ens = ensemble(P=3, seed=2)
    with pytest.raises(InvalidArgument):
        conditional_expectation(ens.values[-1], RegressionBasis(degree=3), float(grid.points[10]), ens.values[10])


def test_piecewise_basis_width():
    grid, ens = ensemble(P=400, d=2)
    design = RegressionBasis(kind="piecewise", bins=4).features(float(grid.points[5]), ens.values[5])
    assert design.shape == (400, 2 * 4 + 2 - 1)
    assert np.all(design[:, 0] == 1.0)
    with pytest.raises(InvalidArgument):
        RegressionBasis(kind="spline").features(0.5, ens.values[5])


def test_constant_terminal_with_zero_driver_is_exact():
    grid, ens = ensemble(T=10.0, M=50, P=1000)
    g = zoo("remark7")
    xi = make_terminal("constant")(ens)
    sol, trace = picard_solve(xi, g, grid, ens, RegressionBasis(degree=3))
    assert np.all(sol.Y == 1.0)
    assert np.all(sol.Z == 0.0)
    assert trace.converged_at == 1
    assert trace.sp_distances[:2] == [1.0, 0.0]
    residuals = residual_check(sol, xi, g)
    assert residuals.max_abs_mean == 0.0 and residuals.max_rms == 0.0


def test_deterministic_ode_sweep():
    grid, ens = ensemble(M=20, P=100)
    g = zoo("linear", {"c": 1.0})
    sol = solve_inner(np.zeros((100, 1)), np.zeros((21, 100, 1)), g, grid, ens, RegressionBasis(degree=2))
    np.testing.assert_allclose(sol.Y[:, 0, 0], 1.0 - grid.points, atol=1e-12)
    assert np.all(sol.Y == sol.Y[:, :1, :])
    assert np.all(sol.Z == 0.0)


def test_inner_sweep_checks_shapes():
    grid, ens = ensemble(M=10, P=50)
    g = zoo("zero")
    with pytest.raises(InvalidArgument):
        solve_inner(np.zeros((49, 1)), np.zeros((11, 50, 1)), g, grid, ens, RegressionBasis())
    with pytest.raises(InvalidArgument):
        solve_inner(np.zeros((50, 1)), np.zeros((10, 50, 1)), g, grid, ens, RegressionBasis())
    with pytest.raises(InvalidArgument):
        solve_inner(np.zeros((50, 1)), np.zeros((11, 50, 1)), g, grid, ens, RegressionBasis(), inner_iters=0)


def test_refined_sweep_moves_z_toward_the_closed_form():
    # g = y + z, xi = B_T: Y_t = e^(T-t) (B_t + T - t), Z_t = e^(T-t)
    grid, ens = ensemble(M=10, P=50_000, seed=4)
    g = zoo("linear", {"a": 1.0, "b": 1.0})
    remaining = grid.T - grid.points
    exact_y = np.exp(remaining)[:, None, None] * (np.array(ens.values) + remaining[:, None, None])
    xi = exact_y[-1].copy()
    basis = RegressionBasis(degree=3)
    explicit = solve_inner(xi, exact_y, g, grid, ens, basis)
    refined = solve_inner(xi, exact_y, g, grid, ens, basis, inner_iters=3)
    once = solve_inner(xi, exact_y, g, grid, ens, basis, inner_iters=2)
    z0 = math.e
    assert abs(refined.Z[0].mean() - z0) < abs(explicit.Z[0].mean() - z0)
    assert abs(refined.Z[0].mean() - z0) < 0.12
    assert abs(refined.y0[0] - explicit.y0[0]) > 0.01
    np.testing.assert_allclose(once.Z, refined.Z, atol=1e-8)
    np.testing.assert_array_equal(explicit.Y[-1], refined.Y[-1])


@pytest.mark.slow
def test_zero_driver_brownian_terminal_tracks_the_path():
    grid, ens = ensemble(P=10_000, seed=11)
    xi = make_terminal("brownian")(ens)
    sol, trace = picard_solve(xi, zoo("zero"), grid, ens, RegressionBasis(degree=3))
    assert trace.converged_at == 1
    assert np.array_equal(sol.Y[-1], xi)
    error = empirical_sp_norm(sol.Y - ens.values, 2.0)
    assert error < 0.05 * empirical_sp_norm(ens.values, 2.0)
    assert np.max(np.abs(sol.Z[:-1].mean(axis=1) - 1.0)) < 0.1


def test_growing_distances_are_reported():
    grid, ens = ensemble(P=100)
    xi = np.ones((100, 1))
    with pytest.raises(DivergenceError) as caught:
        picard_solve(xi, zoo("linear", {"a": 10.0}), grid, ens, RegressionBasis(), n_max=20)
    distances = caught.value.distances
    assert len(distances) == 4
    assert all(later > earlier for earlier, later in zip(distances, distances[1:]))
    assert caught.value.payload()["error"] == "divergence-reported"


def test_non_finite_driver_is_a_divergence():
    grid, ens = ensemble(M=10, P=50)
    blowup = Generator("blowup", 1, 1, lambda t, y, z, b: np.full_like(y, np.inf), Descriptors())
    with pytest.raises(DivergenceError):
        picard_solve(np.ones((50, 1)), blowup, grid, ens, RegressionBasis())


def test_initial_iterate_choice():
    grid, ens = ensemble(M=10, P=50)
    xi = np.ones((50, 1))
    _, trace = picard_solve(xi, zoo("zero"), grid, ens, RegressionBasis(), initial="terminal")
    assert trace.converged_at == 0
    with pytest.raises(InvalidArgument):
        picard_solve(xi, zoo("zero"), grid, ens, RegressionBasis(), initial="random")
    with pytest.raises(InvalidArgument):
        picard_solve(xi, zoo("zero"), grid, ens, RegressionBasis(), p=1.0)


def test_majorant_domination_is_recorded():
    grid, ens = ensemble(M=50, P=100)
    majorant = majorant_sequence(separable(ONE, linear(1.0)), 10.0, 0.5, 1.0, grid=grid)
    _, trace = picard_solve(np.ones((100, 1)), zoo("linear", {"a": 1.0}), grid, ens, RegressionBasis(), majorant=majorant)
    assert trace.converged
    assert trace.majorant_bounds[0] == pytest.approx(10.0)
    assert all(trace.dominated)
    frame = trace.to_frame()
    assert list(frame.columns) == ["n", "spDistance", "mpDistance", "majorantDistance", "majorantBound", "dominated"]
    assert len(frame) == len(trace.sp_distances)


def test_empirical_norms():
    grid = build_grid(2.0, 20)
    ones = np.ones((21, 30, 1))
    assert empirical_sp_norm(ones, 3.0) == pytest.approx(1.0)
    assert empirical_mp_norm(np.ones((21, 30, 1, 1)), 2.0, grid) == pytest.approx(math.sqrt(2.0))
    assert empirical_mp_norm(np.zeros((21, 30, 1, 1)), 2.0, grid) == 0.0
    rng = np.random.default_rng(3)
    Y = rng.normal(size=(21, 30))
    assert empirical_sp_norm(Y[:, ::-1], 2.0) == pytest.approx(empirical_sp_norm(Y, 2.0))
    assert empirical_sp_norm(2.0 * Y, 2.0) >= empirical_sp_norm(Y, 2.0)


def test_exact_discrete_solution_has_zero_residual():
    grid, ens = ensemble(M=30, P=200, seed=4)
    xi = make_terminal("brownian")(ens)
    sol = SolutionEnsemble(np.array(ens.values), np.ones((31, 200, 1, 1)), grid, ens)
    report = residual_check(sol, xi, zoo("zero"))
    assert report.max_rms < 1e-12
    assert list(report.to_frame().columns) == ["t", "meanResidual", "rmsResidual"]


def test_summary_and_binary_export(tmp_path):
    grid, ens = ensemble(M=10, P=40)
    xi = np.ones((40, 1))
    sol, _ = picard_solve(xi, zoo("zero"), grid, ens, RegressionBasis())
    frame = solution_summary(sol)
    assert list(frame.columns) == ["t", "meanY", "seY", "meanAbsZ"]
    np.testing.assert_allclose(frame["meanY"], 1.0)
    y_path, z_path = sol.save(tmp_path)
    assert y_path.stat().st_size == 32 + 40 * 11 * 8
    assert z_path.stat().st_size == 32 + 40 * 11 * 8


def test_uniqueness_probe_on_a_shared_ensemble():
    grid, ens = ensemble(M=20, P=300)
    report = uniqueness_probe(
        zoo("zero"),
        make_terminal("constant"),
        grid,
        [ens, ens],
        [RegressionBasis(degree=2), RegressionBasis(kind="piecewise", bins=8)],
        initials=("zero", "terminal"),
    )
    assert report.sp_distance == 0.0 and report.mp_distance == 0.0
    assert report.within_noise
    assert report.to_dict()["y0"] == [1.0, 1.0]
    with pytest.raises(InvalidArgument):
        uniqueness_probe(zoo("zero"), make_terminal("constant"), grid, [ens], [RegressionBasis()])


def test_uniqueness_probe_across_seeds():
    grid = build_grid(1.0, 20)
    ensembles = [simulate_brownian(grid, 1, 2000, seed) for seed in (1, 2)]
    report = uniqueness_probe(
        zoo("zero"), make_terminal("brownian"), grid, ensembles, [RegressionBasis(degree=3), RegressionBasis(degree=2)]
    )
    assert report.sp_distance is None
    assert report.moment_gap <= 5.0 * report.pooled_se


@pytest.mark.slow
def test_linear_benchmark_matches_closed_form():
    grid, ens = ensemble(M=50, P=10_000, seed=7)
    xi = make_terminal("brownian")(ens)
    sol, trace = picard_solve(xi, zoo("linear", {"a": 1.0, "b": 1.0}), grid, ens, RegressionBasis(degree=3), tol_sp=1e-8)
    assert trace.converged
    assert sol.y0[0] == pytest.approx(math.e, rel=0.05)
    z_mean = sol.Z[:-1, :, 0, 0].mean(axis=1)
    np.testing.assert_allclose(z_mean, np.exp(1.0 - grid.points[:-1]), rtol=0.1)


def example1_setup(P, seed):
    grid, ens = ensemble(M=50, P=P, seed=seed)
    g = zoo("example1")
    return grid, ens, g, make_terminal("abs_capped", {"cap": 1.0})


@pytest.mark.slow
def test_example1_distances_stay_under_the_majorant():
    grid, ens, g, terminal = example1_setup(10_000, 3)
    h4 = translate_hypotheses(g).descriptors.h4
    ledger = make_ledger(2.0, {"hat_m_p": 1.0, "bar_m_p": 1.0})
    last = compute_partition(h4.alpha, h4.beta, h4.rho.envelope_b, ledger, grid).last
    alpha_hat = h4.alpha.power(2.0).integral(0.0, 1.0)
    beta_hat = h4.beta.power(2.0).integral(0.0, 1.0)
    bound = constant_M(ledger, terminal.moment(ens, 2.0), check_H5(g, ens, 2.0).estimate, h4.rho.envelope_a, alpha_hat, beta_hat, 1.0)
    majorant = majorant_sequence(h4.rho, bound.M, last.t_lo, last.t_hi, grid=grid)
    _, trace = picard_solve(terminal(ens), g, grid, ens, RegressionBasis(degree=3), majorant=majorant)
    assert trace.converged
    assert all(trace.dominated)


@pytest.mark.slow
def test_example1_solutions_agree_across_seeds_and_bases():
    grid = build_grid(1.0, 50)
    ensembles = [simulate_brownian(grid, 1, 10_000, seed) for seed in (21, 22)]
    report = uniqueness_probe(
        zoo("example1"),
        make_terminal("abs_capped"),
        grid,
        ensembles,
        [RegressionBasis(degree=3), RegressionBasis(degree=4)],
    )
    assert report.within_noise
    assert report.y0[0] == pytest.approx(report.y0[1], rel=0.05)
