"""Concave moduli, the S[T, a, b] class and the comparison bounds built on them."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgument, InvalidModulus
from .models import CheckResult, OsgoodReport, QuadratureConfig, SClassReport
from .paths import TimeGrid
from .quadrature import ZERO, TimeFunction, integrate_function


logger = logging.getLogger(__name__)

CONCAVE = "concave"
NONDECREASING = "nondecreasing"
VANISHES = "vanishes_at_zero"
OSGOOD = "osgood"
ALL_CLAIMS = frozenset({CONCAVE, NONDECREASING, VANISHES})

BIHARI_EPS = tuple(10.0 ** -k for k in range(2, 13))


@dataclass(frozen=True, eq=False)
class Modulus:
    func: Callable[[np.ndarray], np.ndarray]
    name: str
    claims: FrozenSet[str] = ALL_CLAIMS
    known_osgood: Optional[bool] = None
    params: Tuple[Tuple[str, object], ...] = ()

    def __call__(self, u: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(u, dtype=float))

    def claims_property(self, flag: str) -> bool:
        return flag in self.claims


@dataclass(frozen=True, eq=False)
class TimeModulus:
    func: Callable[[np.ndarray, np.ndarray], np.ndarray]
    envelope_a: TimeFunction
    envelope_b: TimeFunction
    name: str = "rho"
    weight: Optional[TimeFunction] = None
    kappa: Optional[Modulus] = None

    def __call__(self, t: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.func(np.asarray(t, dtype=float), np.asarray(u, dtype=float))

    @property
    def separable(self) -> bool:
        return self.weight is not None and self.kappa is not None


@dataclass(frozen=True)
class GronwallBound:
    times: np.ndarray
    values: np.ndarray


@dataclass(frozen=True)
class BihariResult:
    times: np.ndarray
    r: np.ndarray
    is_zero: bool
    eps: np.ndarray
    solutions: np.ndarray = field(repr=False)
    monotone_in_eps: bool = True


def affine_constant(kappa: Modulus) -> float:
    """A with kappa(u) <= A + A*u; kappa(1) works for concave nondecreasing kappa vanishing at 0."""
    return float(kappa(1.0))


def separable(
    weight: TimeFunction,
    kappa: Modulus,
    envelope_a: Optional[TimeFunction] = None,
    envelope_b: Optional[TimeFunction] = None,
    name: Optional[str] = None,
) -> TimeModulus:
    """rho(t, u) = weight(t) * kappa(u), by default in S[T, A*weight, A*weight]."""
    if envelope_a is None or envelope_b is None:
        A = affine_constant(kappa)
        envelope_a = envelope_a or weight.scaled(A)
        envelope_b = envelope_b or weight.scaled(A)

    def rho(t: np.ndarray, u: np.ndarray) -> np.ndarray:
        k = kappa(u)
        with np.errstate(invalid="ignore"):
            return np.where(k == 0, 0.0, weight(t) * k)

    return TimeModulus(rho, envelope_a, envelope_b, name or f"{weight.name}*{kappa.name}", weight, kappa)


def zero_time_modulus() -> TimeModulus:
    kappa = Modulus(lambda u: np.zeros_like(u), "zero", known_osgood=None)
    return separable(ZERO, kappa, ZERO, ZERO, name="zero")


def _tail_shape(kappa: Modulus, eps: np.ndarray) -> Tuple[float, float]:
    """Fit ln(u / kappa(u)) = c - lam * x - a * ln x with x = ln(1/u) over the deep tail.

    Returns (lam * x_end, a): the exponential decay accumulated across the
    tail and the power of x left over once it is removed.
    """
    x = -np.log(eps)
    x_end = float(x[-1])
    mask = (x > 0) & (x >= x_end / 16.0)
    if np.count_nonzero(mask) < 3:
        mask = x > 0
    if np.count_nonzero(mask) < 3:
        raise InvalidArgument("eps_floor must lie well below 1 for the tail fit.")
    u, xs = eps[mask], x[mask]
    log_f = np.log(u) - np.log(kappa(u))
    design = np.column_stack((np.ones_like(xs), -xs, -np.log(xs)))
    (_, lam, power), *_ = np.linalg.lstsq(design, log_f, rcond=None)
    return float(lam) * x_end, float(power)


def osgood_diagnostic(
    kappa: Modulus,
    u0: float = 1.0,
    eps_floor: float = 1e-300,
    quad: Optional[QuadratureConfig] = None,
    points_per_decade: int = 4,
    decay_threshold: float = 0.25,
    power_threshold: float = 1.5,
) -> OsgoodReport:
    """Heuristic test of the integral of 1/kappa near 0.

    I(eps) is integrated in the variable s = ln u, where the integrand is
    u/kappa(u). Its logarithm is fitted against x = ln(1/u) and ln x over the
    deepest sixteenth-to-full range of x: an exponential decay in x (power
    moduli u^theta, theta < 1) or a power of x above ``power_threshold``
    means I settles; a flat or log-type profile (u, u|ln u|) means it keeps
    growing. ``slope`` is the growth of I against ln ln(u0/eps) for the
    record.
    """
    if not (u0 > 0 and 0 < eps_floor < u0):
        raise InvalidArgument("Need 0 < eps_floor < u0.")
    decades = math.log10(u0 / eps_floor)
    count = max(8, int(math.ceil(decades * points_per_decade)))
    eps = u0 * np.power(10.0, -np.linspace(0.0, decades, count + 1))
    eps[-1] = eps_floor
    if np.any(~(kappa(eps[1:]) > 0)):
        raise InvalidModulus(f"{kappa.name} vanishes on (0, u0].")

    def integrand(s: np.ndarray) -> np.ndarray:
        u = np.exp(s)
        k = kappa(u)
        if np.any(~(k > 0)):
            raise InvalidModulus(f"{kappa.name} vanishes inside (0, u0].")
        return u / k

    logs = np.log(eps)
    pieces = [integrate_function(integrand, float(lo), float(hi), quad)[0] for hi, lo in zip(logs[:-1], logs[1:])]
    integral = np.concatenate(([0.0], np.cumsum(pieces)))
    tail = slice(3 * count // 4, None)
    x = np.log(np.log(u0 / eps[tail]))
    slope = float(np.polyfit(x, integral[tail], 1)[0])
    decay, power = _tail_shape(kappa, eps)
    if decay >= decay_threshold:
        numeric = "convergent-likely"
    elif decay <= -decay_threshold:
        numeric = "divergent-likely"
    else:
        numeric = "convergent-likely" if power > power_threshold else "divergent-likely"
    if kappa.known_osgood is None:
        classification, source = numeric, "heuristic"
    else:
        classification = "divergent-likely" if kappa.known_osgood else "convergent-likely"
        source = "registry"
    logger.debug("Osgood tail of %s: decay %.4g, power %.4g (%s).", kappa.name, decay, power, numeric)
    return OsgoodReport(
        classification=classification,
        numeric_classification=numeric,
        source=source,
        slope=slope,
        tail_decay=decay,
        tail_power=power,
        eps=eps.tolist(),
        integral=integral.tolist(),
    )


def power_transform(rho: Modulus, r: float) -> Modulus:
    """x -> rho(x^(1/r))^r."""
    if not r > 0:
        raise InvalidArgument("The transform exponent r must be positive.")
    claims = set(rho.claims & {NONDECREASING, VANISHES})
    if CONCAVE in rho.claims and r >= 1:
        claims.add(CONCAVE)
    known = rho.known_osgood
    if r == 1:
        claims |= rho.claims
    elif r > 1:
        known = None
    elif known is False:
        known = None
    if known:
        claims.add(OSGOOD)
    inner = rho.func

    def transformed(x: np.ndarray) -> np.ndarray:
        return np.power(inner(np.power(x, 1.0 / r)), r)

    return Modulus(transformed, f"{rho.name}^[{r!r}]", frozenset(claims), known, (("r", r),))


def h7_modulus(rho2: Modulus, p: float) -> Modulus:
    """kappa(u) = rho2^p(u^(1/p)) + u."""
    transformed = power_transform(rho2, p)
    claims = transformed.claims & {CONCAVE, NONDECREASING, VANISHES}
    return Modulus(lambda u: transformed(u) + u, f"{transformed.name}+u", claims, None, (("p", p),))


def young_split(kappa_bar: Modulus, p: float, u: np.ndarray, v: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """The two terms bounding kappa_bar^(1/p)(u) * v."""
    if not p > 1:
        raise InvalidArgument("p must exceed 1.")
    first = (p - 1.0) / p * np.power(kappa_bar(u), 1.0 / (p - 1.0))
    second = np.power(np.asarray(v, dtype=float), p) / p
    return first, second


def _upper_hull(xs: np.ndarray, ys: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    hull: List[Tuple[float, float]] = []
    for x, y in zip(xs, ys):
        while len(hull) >= 2:
            (ox, oy), (ax, ay) = hull[-2], hull[-1]
            if (ax - ox) * (y - oy) - (ay - oy) * (x - ox) >= 0:
                hull.pop()
            else:
                break
        hull.append((float(x), float(y)))
    vertices = np.array(hull)
    return vertices[:, 0], vertices[:, 1]


def concavify(rho1: Modulus, domain_cap: float, grid_size: int = 512, decades: float = 12.0) -> Modulus:
    """Least concave majorant of rho1 sampled on a log grid over [0, domain_cap]."""
    if not domain_cap > 0 or grid_size < 3:
        raise InvalidArgument("concavify needs domain_cap > 0 and grid_size >= 3.")
    xs = np.concatenate(([0.0], np.geomspace(domain_cap * 10.0**-decades, domain_cap, grid_size - 1)))
    ys = rho1(xs)
    if not np.all(np.isfinite(ys)) or np.any(ys < 0):
        raise InvalidModulus(f"{rho1.name} is not finite and nonnegative on the sample grid.")
    if np.any(np.diff(ys) < 0):
        raise InvalidModulus(f"{rho1.name} decreases on the sample grid.")
    hx, hy = _upper_hull(xs, ys)
    last_slope = (hy[-1] - hy[-2]) / (hx[-1] - hx[-2]) if hx.size > 1 else 0.0

    def majorant(u: np.ndarray) -> np.ndarray:
        inside = np.interp(u, hx, hy)
        return np.where(u > hx[-1], hy[-1] + last_slope * (u - hx[-1]), inside)

    claims = {CONCAVE, NONDECREASING}
    if hy[0] == 0:
        claims.add(VANISHES)
    return Modulus(
        majorant,
        f"concave-majorant({rho1.name})",
        frozenset(claims),
        None,
        (("vertices", tuple(zip(hx.tolist(), hy.tolist()))),),
    )


def chord_bound_check(kappa: Modulus, samples: int = 1001) -> Tuple[bool, float]:
    """kappa(u) >= u * kappa(1) on [0, 1]; returns (holds, worst gap)."""
    u = np.linspace(0.0, 1.0, samples)
    gap = kappa(u) - u * float(kappa(1.0))
    worst = float(gap.min())
    return worst >= -1e-12, worst


def backward_gronwall_bound(
    alpha: TimeFunction,
    beta: TimeFunction,
    grid: TimeGrid,
    quad: Optional[QuadratureConfig] = None,
) -> GronwallBound:
    T = grid.T
    if not math.isfinite(beta.integral(0.0, T, quad)):
        raise InvalidArgument(f"The integral of {beta.name} over [0, T] diverges.")
    exponents = np.array([beta.integral(float(t), T, quad) for t in grid.points])
    values = alpha(grid.points) * np.exp(exponents)
    return GronwallBound(grid.points.copy(), values)


def _euler_interval(rho: TimeModulus, u: np.ndarray, t_right: float, width: float, n: int) -> np.ndarray:
    h = width / n
    v = u.copy()
    for j in range(n):
        v = np.maximum(v + h * rho(t_right - j * h, v), 0.0)
    return v


def _eps_limit(column: np.ndarray) -> Tuple[float, bool]:
    """Limit of u_eps(t) as eps -> 0 from the three smallest eps (Aitken step)."""
    monotone = bool(np.all(np.diff(column) <= 1e-15 * np.maximum(1.0, np.abs(column[:-1]))))
    s0, s1, s2 = column[-3:]
    limit = float(s2)
    first, second = s1 - s0, s2 - s1
    if monotone and first < 0 and second <= 0:
        ratio = second / first
        if 0 <= ratio < 1:
            limit = float(s2 + second * ratio / (1.0 - ratio))
    return min(max(limit, 0.0), float(s2)), monotone


def bihari_comparison(
    rho: TimeModulus,
    grid: TimeGrid,
    eps_terminal: Optional[Sequence[float]] = None,
    abs_tol: float = 1e-9,
    rel_tol: float = 1e-6,
    max_halvings: int = 12,
    zero_tol: float = 1e-6,
) -> BihariResult:
    """Backward solutions of u' = -rho(t, u), u(T) = eps, and their limit as eps -> 0."""
    eps = np.array(eps_terminal if eps_terminal is not None else BIHARI_EPS, dtype=float)
    if eps.size < 3 or np.any(np.diff(eps) >= 0) or np.any(eps <= 0):
        raise InvalidArgument("eps_terminal must be at least 3 positive values decreasing to 0.")
    solutions = np.empty((eps.size, grid.M + 1))
    solutions[:, -1] = eps
    u = eps.copy()
    for i in range(grid.M - 1, -1, -1):
        t_right, width = float(grid.points[i + 1]), float(grid.steps[i])
        coarse = _euler_interval(rho, u, t_right, width, 1)
        for k in range(1, max_halvings + 1):
            fine = _euler_interval(rho, u, t_right, width, 2**k)
            close = np.max(np.abs(fine - coarse)) <= abs_tol + rel_tol * np.max(np.abs(fine))
            coarse = fine
            if close:
                break
        u = coarse
        solutions[:, i] = u
    limits = [_eps_limit(solutions[:, i]) for i in range(grid.M + 1)]
    r = np.array([value for value, _ in limits])
    # the limit inherits monotonicity in t from each u_eps
    r = np.maximum.accumulate(r[::-1])[::-1]
    monotone = all(flag for _, flag in limits)
    return BihariResult(grid.points.copy(), r, bool(r.max() <= zero_tol), eps, solutions, monotone)


def s_class_check(
    rho: TimeModulus,
    grid: TimeGrid,
    samples: int = 1000,
    quad: Optional[QuadratureConfig] = None,
    seed: int = 0,
) -> SClassReport:
    checks: List[CheckResult] = []
    T = grid.T
    envelope_integral = rho.envelope_a.integral(0.0, T, quad) + rho.envelope_b.integral(0.0, T, quad)
    if math.isfinite(envelope_integral):
        checks.append(CheckResult(name="integrable-envelopes", status="pass", value=envelope_integral))
    else:
        checks.append(
            CheckResult(name="integrable-envelopes", status="fail", detail="integral of a + b diverges on [0, T]")
        )

    rng = np.random.default_rng(seed)
    t_min = float(grid.points[1]) if grid.M > 1 else T
    t = rng.uniform(t_min, T, samples)
    half = samples // 2
    u = np.concatenate((np.power(10.0, rng.uniform(-12.0, 3.0, half)), rng.uniform(0.0, 10.0, samples - half)))
    lhs = rho(t, u)
    rhs = rho.envelope_a(t) + rho.envelope_b(t) * u
    excess = lhs - rhs * (1.0 + 1e-12) - 1e-14
    if np.all(excess <= 0):
        checks.append(CheckResult(name="affine-envelope", status="pass", value=float(excess.max())))
    else:
        worst = int(np.argmax(excess))
        checks.append(
            CheckResult(
                name="affine-envelope",
                status="fail",
                value=float(excess[worst]),
                detail=f"t={t[worst]!r} u={u[worst]!r} rho={lhs[worst]!r} > a+b*u={rhs[worst]!r}",
            )
        )

    comparison = bihari_comparison(rho, grid)
    r0 = float(comparison.r[0])
    if comparison.is_zero:
        checks.append(CheckResult(name="zero-solution-unique", status="pass", value=r0))
    else:
        checks.append(
            CheckResult(
                name="zero-solution-unique",
                status="fail",
                value=r0,
                detail=f"maximal backward solution leaves 0: r(0)={r0!r}",
            )
        )
    member = all(check.status == "pass" for check in checks)
    return SClassReport(member=member, checks=checks, envelope_integral=envelope_integral, r_at_zero=r0)


def step_integrals(rho: TimeModulus, values: np.ndarray, grid: TimeGrid, t_floor: Optional[float] = None) -> np.ndarray:
    """Per-step integrals of rho(t, values_t), shape (M,) + values.shape[1:].

    Separable moduli integrate their weight exactly per step with the value
    frozen at the left point; otherwise the trapezoid rule runs on times
    floored at t_floor.
    """
    values = np.asarray(values, dtype=float)
    shape = (grid.M,) + (1,) * (values.ndim - 1)
    if rho.separable:
        weights = np.array([rho.weight.integral(float(a), float(b)) for a, b in zip(grid.points[:-1], grid.points[1:])])
        return weights.reshape(shape) * rho.kappa(values[:-1])
    floor = t_floor if t_floor is not None else float(grid.points[1]) / 2.0
    times = np.maximum(grid.points, floor).reshape((grid.M + 1,) + (1,) * (values.ndim - 1))
    heights = rho(times, values)
    return grid.steps.reshape(shape) * (heights[:-1] + heights[1:]) / 2.0


def time_integral(rho: TimeModulus, values: np.ndarray, grid: TimeGrid, t_floor: Optional[float] = None) -> np.ndarray:
    """Integral of rho(t, values_t) over the grid, per trailing index."""
    return np.sum(step_integrals(rho, values, grid, t_floor), axis=0)
