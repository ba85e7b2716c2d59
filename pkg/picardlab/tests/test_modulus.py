import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from backend.errors import InvalidArgument, InvalidModulus
from backend.moduli import linear, make_modulus, power, table
from backend.modulus import (
    CONCAVE,
    Modulus,
    affine_constant,
    backward_gronwall_bound,
    bihari_comparison,
    chord_bound_check,
    concavify,
    h7_modulus,
    osgood_diagnostic,
    power_transform,
    s_class_check,
    separable,
    step_integrals,
    time_integral,
    young_split,
)
from backend.paths import build_grid
from backend.quadrature import ONE, PowerLaw

concave_tables = st.lists(
    st.tuples(st.floats(0.05, 2.0), st.floats(0.0, 10.0)), min_size=1, max_size=8
).map(
    lambda pieces: table(
        list(
            zip(
                np.cumsum([width for width, _ in pieces]).tolist(),
                np.cumsum(
                    [width * slope for width, slope in zip([w for w, _ in pieces], sorted((s for _, s in pieces), reverse=True))]
                ).tolist(),
            )
        )
    )
)


def _unknown(func, name):
    return Modulus(func, name, known_osgood=None)


@pytest.mark.parametrize(
    "kappa, u0, expected",
    [
        (_unknown(lambda u: u, "u"), 1.0, "divergent-likely"),
        (_unknown(np.sqrt, "sqrt"), 1.0, "convergent-likely"),
        (_unknown(lambda u: np.power(u, 0.8), "u^0.8"), 1.0, "convergent-likely"),
        (_unknown(lambda u: u * np.abs(np.log(u)), "u|ln u|"), 0.5, "divergent-likely"),
        (_unknown(lambda u: u * np.log(u) ** 2, "u ln^2 u"), 0.5, "convergent-likely"),
    ],
)
def test_osgood_classification_matches_the_antiderivative(kappa, u0, expected):
    report = osgood_diagnostic(kappa, u0=u0)
    assert report.source == "heuristic"
    assert report.classification == expected
    assert report.numeric_classification == expected


@settings(max_examples=20)
@given(theta=st.floats(0.2, 0.999))
def test_sublinear_powers_are_never_osgood(theta):
    report = osgood_diagnostic(_unknown(lambda u: np.power(u, theta), f"u^{theta}"))
    assert report.numeric_classification == "convergent-likely"
    assert report.tail_decay == pytest.approx((1.0 - theta) * 300 * math.log(10.0), rel=1e-6)
    assert abs(report.tail_power) < 1e-6


def test_power_half_integral_ends_near_two():
    report = osgood_diagnostic(power(0.5))
    assert report.classification == "convergent-likely"
    assert report.source == "registry"
    assert report.integral[-1] == pytest.approx(2.0, rel=1e-6)
    assert np.all(np.diff(report.integral) >= 0)


def test_osgood_rejects_vanishing_moduli():
    with pytest.raises(InvalidModulus):
        osgood_diagnostic(_unknown(lambda u: np.zeros_like(u), "zero"))
    with pytest.raises(InvalidArgument):
        osgood_diagnostic(power(0.5), u0=1.0, eps_floor=2.0)


@settings(max_examples=25)
@given(kappa=concave_tables, r=st.sampled_from([1.5, 2.0, 3.0, 5.0]), seed=st.integers(0, 2**32 - 1))
def test_power_transform_keeps_concavity(kappa, r, seed):
    transformed = power_transform(kappa, r)
    rng = np.random.default_rng(seed)
    x, y = rng.uniform(0.0, 20.0, (2, 1000))
    left = transformed(0.5 * (x + y))
    right = 0.5 * (transformed(x) + transformed(y))
    scale = np.maximum(1.0, np.abs(right))
    assert np.all(left >= right - 1e-12 * scale)


@settings(max_examples=25)
@given(kappa=concave_tables)
def test_chord_bound_for_concave_moduli(kappa):
    holds, worst = chord_bound_check(kappa)
    assert holds, worst


def test_chord_bound_fails_for_a_convex_modulus():
    holds, worst = chord_bound_check(_unknown(np.square, "u^2"))
    assert not holds
    assert worst == pytest.approx(-0.25, abs=1e-6)


def test_power_transform_of_power_modulus():
    transformed = power_transform(power(0.5), 2.0)
    u = np.array([0.0, 0.25, 4.0])
    np.testing.assert_allclose(transformed(u), np.sqrt(u))
    assert transformed.known_osgood is None
    assert power_transform(power(0.5), 1.0).known_osgood is False
    with pytest.raises(InvalidArgument):
        power_transform(power(0.5), 0.0)


def test_h7_modulus_adds_the_identity():
    kappa = h7_modulus(linear(2.0), 2.0)
    np.testing.assert_allclose(kappa(np.array([0.0, 1.0, 9.0])), [0.0, 5.0, 45.0])


def test_young_split_bounds_the_product():
    kappa_bar = make_modulus("xlogx")
    u = np.geomspace(1e-8, 1.0, 50)
    v = np.linspace(0.0, 3.0, 50)
    first, second = young_split(kappa_bar, 2.0, u, v)
    assert np.all(np.sqrt(kappa_bar(u)) * v <= first + second + 1e-15)


def test_concave_majorant():
    bumpy = _unknown(lambda u: np.minimum(u, 1.0) + np.maximum(u - 2.0, 0.0) * 0.5, "bumpy")
    hull = concavify(bumpy, 4.0, 256)
    nodes = np.concatenate(([0.0], np.geomspace(4.0e-12, 4.0, 255)))
    assert np.all(hull(nodes) >= bumpy(nodes) - 1e-12)
    assert np.all(np.diff(hull(np.linspace(0.0, 4.0, 401)), 2) <= 1e-12)
    assert CONCAVE in hull.claims
    already = concavify(power(0.5), 1.0, 256)
    samples = np.geomspace(1e-12, 1.0, 64)
    np.testing.assert_allclose(already(samples), np.sqrt(samples), rtol=1e-3)
    with pytest.raises(InvalidModulus):
        concavify(_unknown(lambda u: -u, "negative"), 1.0)


def test_affine_constant_and_separable_envelopes():
    kappa = power(0.5)
    assert affine_constant(kappa) == 1.0
    rho = separable(PowerLaw(2.0), kappa)
    assert rho.separable
    t = np.array([0.3])
    assert rho(t, np.array([4.0]))[0] == pytest.approx(4.0)
    assert rho.envelope_a(t)[0] == 2.0


def test_bihari_linear_has_only_the_zero_solution():
    rho = separable(ONE, linear(1.0))
    result = bihari_comparison(rho, build_grid(1.0, 20))
    assert result.is_zero
    assert result.monotone_in_eps


def test_bihari_square_root_leaves_zero():
    rho = separable(ONE, power(0.5))
    result = bihari_comparison(rho, build_grid(1.0, 50))
    assert not result.is_zero
    assert result.r[0] == pytest.approx(0.25, abs=1e-4)
    np.testing.assert_allclose(result.r, (1.0 - result.times) ** 2 / 4.0, atol=1e-4)


def test_s_class_membership():
    grid = build_grid(1.0, 50)
    member = s_class_check(separable(ONE, linear(1.0)), grid)
    assert member.member
    rejected = s_class_check(separable(ONE, power(0.5)), grid)
    assert not rejected.member
    assert rejected.r_at_zero == pytest.approx(0.25, abs=1e-4)
    failed = {check.name for check in rejected.checks if check.status == "fail"}
    assert failed == {"zero-solution-unique"}


def test_backward_gronwall_bound():
    grid = build_grid(1.0, 10)
    bound = backward_gronwall_bound(ONE, PowerLaw(2.0), grid)
    np.testing.assert_allclose(bound.values, np.exp(2.0 * (1.0 - grid.points)))
    with pytest.raises(InvalidArgument):
        backward_gronwall_bound(ONE, PowerLaw(1.0, -1.0), grid)


def test_time_integral_of_separable_modulus_is_exact_in_time():
    grid = build_grid(1.0, 4)
    rho = separable(PowerLaw(1.0, -0.5), linear(1.0))
    values = np.ones((5, 3))
    steps = step_integrals(rho, values, grid)
    assert steps.shape == (4, 3)
    np.testing.assert_allclose(time_integral(rho, values, grid), 2.0)


def test_time_integral_of_general_modulus_uses_trapezoid():
    grid = build_grid(1.0, 100)
    rho = separable(ONE, linear(1.0))
    general = type(rho)(rho.func, rho.envelope_a, rho.envelope_b, "copy")
    values = grid.points[:, None] * np.ones((1, 2))
    np.testing.assert_allclose(time_integral(general, values, grid), 0.5, rtol=1e-12)
