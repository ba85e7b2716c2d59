from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Mapping, Optional

import numpy as np

from .errors import InvalidArgument
from .moduli import linear as linear_modulus
from .moduli import splice_profile, xlogx, xloglog
from .models import CheckResult, H5Estimate, HypothesisReport, QuadratureConfig, Witness
from .modulus import Modulus, TimeModulus, power_transform, s_class_check, separable
from .paths import PathEnsemble, TimeGrid
from .quadrature import ONE, ZERO, PowerLaw, TimeFunction, constant


logger = logging.getLogger(__name__)

Driver = Callable[[np.ndarray, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True, eq=False)
class H1:
    """|dg|^2 <= kappa(|dy|^2) + c|dz|^2 (p = 2)."""

    kappa: Modulus
    c: float


@dataclass(frozen=True, eq=False)
class H2:
    """|dg|^2 <= kappa(t, |dy|^2) + c|dz|^2 (p = 2)."""

    kappa: TimeModulus
    c: float


@dataclass(frozen=True, eq=False)
class H3:
    u: TimeFunction
    v: TimeFunction


@dataclass(frozen=True, eq=False)
class H4:
    alpha: TimeFunction
    beta: TimeFunction
    rho: TimeModulus


@dataclass(frozen=True, eq=False)
class H6:
    b: TimeFunction
    c: TimeFunction
    kappa_bar: Modulus


@dataclass(frozen=True, eq=False)
class H6Star:
    b: TimeFunction
    c: TimeFunction
    kappa: Modulus


@dataclass(frozen=True, eq=False)
class H5Claim:
    note: str = "integrable at the origin"


@dataclass(frozen=True)
class Descriptors:
    h1: Optional[H1] = None
    h2: Optional[H2] = None
    h3: Optional[H3] = None
    h4: Optional[H4] = None
    h5: Optional[H5Claim] = None
    h6: Optional[H6] = None
    h6_star: Optional[H6Star] = None

    def attached(self) -> List[str]:
        return [name for name in ("h1", "h2", "h3", "h4", "h5", "h6", "h6_star") if getattr(self, name) is not None]


@dataclass(frozen=True, eq=False)
class Generator:
    name: str
    k: int
    d: int
    func: Driver = field(repr=False)
    descriptors: Descriptors = field(default_factory=Descriptors)
    p: float = 2.0
    params: Dict[str, float] = field(default_factory=dict)
    singular_at_zero: bool = False
    infinite_horizon: bool = False

    def __call__(self, t: np.ndarray, y: np.ndarray, z: np.ndarray, b: np.ndarray) -> np.ndarray:
        return self.func(t, y, z, b)

    def at_origin(self, t: np.ndarray, b: np.ndarray) -> np.ndarray:
        b = np.asarray(b, dtype=float)
        count = b.shape[0]
        return self.func(t, np.zeros((count, self.k)), np.zeros((count, self.k, self.d)), b)


def frobenius(z: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(np.square(z), axis=(-2, -1)))


def _column(values: np.ndarray) -> np.ndarray:
    return np.reshape(np.asarray(values, dtype=float), (-1, 1))


def _unit(k: int) -> np.ndarray:
    return np.full(k, 1.0 / math.sqrt(k))


CONSISTENCY_TIMES = np.geomspace(1e-3, 10.0, 48)
CONSISTENCY_GAPS = np.geomspace(1e-6, 1e3, 48)


def _h3_exceeds_h4(h3: H3, h4: H4, p: float) -> Optional[str]:
    """Sampled test that the attached H4 envelope covers the attached H3 constants."""
    t, gap = (axis.ravel() for axis in np.meshgrid(CONSISTENCY_TIMES, CONSISTENCY_GAPS, indexing="ij"))
    with np.errstate(over="ignore", invalid="ignore"):
        y_bound = h4.alpha(t) * np.power(h4.rho(t, np.power(gap, p)), 1.0 / p)
        y_lipschitz = h3.u(t) * gap
    short = y_lipschitz > y_bound * (1.0 + 1e-9) + 1e-12
    if np.any(short):
        i = int(np.argmax(short))
        return f"u(t)|dy| exceeds the H4 bound at t={t[i]!r}, |dy|={gap[i]!r}"
    z_short = h3.v(CONSISTENCY_TIMES) > h4.beta(CONSISTENCY_TIMES) * (1.0 + 1e-9) + 1e-12
    if np.any(z_short):
        return f"v(t) exceeds beta(t) at t={CONSISTENCY_TIMES[int(np.argmax(z_short))]!r}"
    return None


def translate_hypotheses(g: Generator, p: Optional[float] = None) -> Generator:
    """Fill every descriptor derivable from the attached ones; attached ones are never replaced.

    Contradictions raise invalid-argument: H1 or H2 with p != 2, and an
    attached H4 whose envelope does not cover the attached H3 constants
    (checked on t in [1e-3, 10], |dy| in [1e-6, 1e3]). No other pairing is
    cross-checked.
    """
    p = g.p if p is None else p
    desc = g.descriptors
    if not desc.attached():
        raise InvalidArgument(f"{g.name} carries no hypothesis descriptor.")
    if (desc.h1 is not None or desc.h2 is not None) and p != 2:
        raise InvalidArgument("H1 and H2 are square-integrability statements and need p = 2.")
    if desc.h3 is not None and desc.h4 is not None:
        clash = _h3_exceeds_h4(desc.h3, desc.h4, p)
        if clash is not None:
            raise InvalidArgument(f"{g.name} carries contradictory H3 and H4 descriptors: {clash}.")
    updates = {}
    h6 = desc.h6
    if h6 is None and desc.h1 is not None:
        h6 = H6(ONE, constant(math.sqrt(desc.h1.c)), desc.h1.kappa)
    if h6 is None and desc.h3 is not None:
        h6 = H6(desc.h3.u, desc.h3.v, linear_modulus(1.0))
    if h6 is None and desc.h6_star is not None:
        h6 = H6(desc.h6_star.b, desc.h6_star.c, power_transform(desc.h6_star.kappa, p))
    if h6 is not desc.h6:
        updates["h6"] = h6
    h4 = desc.h4
    if h4 is None and desc.h2 is not None:
        h4 = H4(ONE, constant(math.sqrt(desc.h2.c)), desc.h2.kappa)
    if h4 is None and h6 is not None:
        h4 = H4(h6.b.power((p - 1.0) / p), h6.c, separable(h6.b, h6.kappa_bar))
    if h4 is not desc.h4:
        updates["h4"] = h4
    if not updates:
        return g
    return replace(g, descriptors=replace(desc, **updates))


def _sample_pairs(rng: np.random.Generator, shape: tuple, spread: float) -> tuple:
    count = shape[0]
    first = rng.uniform(-spread, spread, shape)
    second = rng.uniform(-spread, spread, shape)
    # half of the pairs are close together to probe the modulus near 0
    close = count // 2
    direction = rng.standard_normal((close,) + shape[1:])
    norms = np.sqrt(np.sum(direction.reshape(close, -1) ** 2, axis=1)).reshape((close,) + (1,) * (len(shape) - 1))
    scale = np.power(10.0, rng.uniform(-8.0, 0.0, close)).reshape(norms.shape)
    second[:close] = first[:close] + direction / np.maximum(norms, 1e-300) * scale
    return first, second


def check_H4_sampled(
    g: Generator,
    grid: TimeGrid,
    desc: Optional[H4] = None,
    p: Optional[float] = None,
    samples: int = 10_000,
    y_range: float = 10.0,
    z_range: float = 10.0,
    seed: int = 0,
    quad: Optional[QuadratureConfig] = None,
    s_class: bool = True,
) -> HypothesisReport:
    p = g.p if p is None else p
    if not p > 1:
        raise InvalidArgument("p must exceed 1.")
    if desc is None:
        desc = translate_hypotheses(g, p).descriptors.h4
    if desc is None:
        raise InvalidArgument(f"No H4 descriptor is attached or derivable for {g.name}.")
    T = grid.T
    checks: List[CheckResult] = []

    rng = np.random.default_rng(seed)
    t = rng.uniform(float(grid.points[1]), T, samples)
    y1, y2 = _sample_pairs(rng, (samples, g.k), y_range)
    z1, z2 = _sample_pairs(rng, (samples, g.k, g.d), z_range)
    b = rng.standard_normal((samples, g.d)) * np.sqrt(t)[:, None]
    lhs = np.linalg.norm(g(t, y1, z1, b) - g(t, y2, z2, b), axis=1)
    dy = np.linalg.norm(y1 - y2, axis=1)
    rhs = desc.alpha(t) * np.power(desc.rho(t, np.power(dy, p)), 1.0 / p) + desc.beta(t) * frobenius(z1 - z2)
    excess = lhs - rhs * (1.0 + 1e-9) - 1e-12
    if np.all(excess <= 0):
        checks.append(CheckResult(name="lipschitz-modulus", status="pass", value=float(excess.max())))
    else:
        i = int(np.argmax(excess))
        witness = Witness(
            t=float(t[i]),
            y1=y1[i].tolist(),
            y2=y2[i].tolist(),
            z1=z1[i].tolist(),
            z2=z2[i].tolist(),
            lhs=float(lhs[i]),
            rhs=float(rhs[i]),
        )
        violations = int(np.count_nonzero(excess > 0))
        checks.append(
            CheckResult(
                name="lipschitz-modulus",
                status="fail",
                value=float(excess[i]),
                detail=f"{violations} of {samples} samples violate the bound",
                witness=witness,
            )
        )

    integrals = {
        "alpha^(p/(p-1))": desc.alpha.power(p / (p - 1.0)).integral(0.0, T, quad),
        "beta^2": desc.beta.power(2.0).integral(0.0, T, quad),
    }
    for name, value in integrals.items():
        if math.isfinite(value):
            checks.append(CheckResult(name=f"integrable {name}", status="pass", value=value))
        else:
            checks.append(CheckResult(name=f"integrable {name}", status="fail", detail=f"{name} diverges on [0, T]"))

    report_s_class = None
    if s_class:
        report_s_class = s_class_check(desc.rho, grid, samples=min(samples, 2000), quad=quad, seed=seed)
        if report_s_class.member:
            checks.append(CheckResult(name="rho in S[T,a,b]", status="pass", value=report_s_class.r_at_zero))
        else:
            failed = [check.name for check in report_s_class.checks if check.status == "fail"]
            checks.append(CheckResult(name="rho in S[T,a,b]", status="fail", detail=f"failed: {', '.join(failed)}"))

    status = "fail" if any(check.status == "fail" for check in checks) else "pass"
    logger.info("H4 check for %s: %s over %d samples.", g.name, status, samples)
    return HypothesisReport(
        generator=g.name,
        hypothesis="H4",
        p=p,
        status=status,
        samples=samples,
        checks=checks,
        integrals=integrals,
        s_class=report_s_class,
    )


def driver_times(g: Generator, grid: TimeGrid, t_floor: Optional[float] = None) -> np.ndarray:
    """Grid times at which the driver is evaluated; singular drivers never see t = 0."""
    if not g.singular_at_zero:
        return grid.points
    floor = float(grid.points[1]) / 2.0 if t_floor is None else t_floor
    return np.maximum(grid.points, floor)


def check_H5(g: Generator, ens: PathEnsemble, p: float, t_floor: Optional[float] = None) -> H5Estimate:
    if not p > 1:
        raise InvalidArgument("p must exceed 1.")
    grid = ens.grid
    times = driver_times(g, grid, t_floor)
    values = ens.values
    with np.errstate(over="ignore", invalid="ignore"):
        magnitudes = np.stack([np.linalg.norm(g.at_origin(times[i], values[i]), axis=1) for i in range(grid.M + 1)])
        integrals = np.trapezoid(magnitudes, grid.points, axis=0)
        powered = np.power(integrals, p)
    estimate = float(np.mean(powered))
    if ens.P > 1:
        standard_error = float(np.std(powered, ddof=1) / math.sqrt(ens.P))
    else:
        standard_error = 0.0
    half = ens.P // 2
    halves = [float(np.mean(powered[:half])) if half else estimate, float(np.mean(powered[half:]))]
    if math.isfinite(estimate) and math.isfinite(standard_error):
        # each half carries about sqrt(2) times the full standard error
        spread = 6.0 * standard_error
        stable = abs(halves[0] - halves[1]) <= spread + 1e-12 * abs(estimate)
    else:
        stable = False
    if not stable:
        logger.warning("H5 estimate for %s is unstable across half-samples: %s", g.name, halves)
    return H5Estimate(estimate=estimate, standard_error=standard_error, stable=stable, half_estimates=halves)


def _zero(k: int = 1, d: int = 1, p: float = 2.0) -> Generator:
    def driver(t, y, z, b):
        return np.zeros_like(np.asarray(y, dtype=float))

    return Generator("zero", int(k), int(d), driver, Descriptors(h3=H3(ZERO, ZERO), h5=H5Claim()), p)


def _remark7(p: float = 2.0) -> Generator:
    g = _zero(1, 1, p)
    return replace(g, name="remark7", infinite_horizon=True)


def _linear(a: float = 0.0, b: float = 0.0, c: float = 0.0, p: float = 2.0) -> Generator:
    def driver(t, y, z, bt):
        return a * y + b * z[:, :, 0] + c

    return Generator(
        "linear",
        1,
        1,
        driver,
        Descriptors(h3=H3(constant(abs(a)), constant(abs(b))), h5=H5Claim()),
        p,
        {"a": a, "b": b, "c": c},
    )


def _example1(p: float = 2.0, delta: float = 0.1, k: int = 1, d: int = 1) -> Generator:
    profile = splice_profile("h", p, delta)
    unit = _unit(int(k))

    def driver(t, y, z, bt):
        t = np.asarray(t, dtype=float)
        scalar = (
            profile(np.linalg.norm(y, axis=1)) / np.sqrt(t)
            + frobenius(z) / np.power(t, 0.25)
            + np.linalg.norm(bt, axis=1)
        )
        return scalar[:, None] * unit

    desc = Descriptors(h6=H6(PowerLaw(1.0, -0.5), PowerLaw(1.0, -0.25), xlogx(p, delta)), h5=H5Claim())
    return Generator("example1", int(k), int(d), driver, desc, p, {"p": p, "delta": delta}, singular_at_zero=True)


def _example2(p: float = 2.0, delta: float = 0.1, k: int = 1, d: int = 1) -> Generator:
    profile = splice_profile("sigma", p, delta)
    unit = _unit(int(k))

    def driver(t, y, z, bt):
        t = np.asarray(t, dtype=float)
        decay = 1.0 / (1.0 + t)
        scalar = profile(np.linalg.norm(y, axis=1)) * decay**2 + frobenius(z) * decay + decay**2
        return scalar[:, None] * unit

    desc = Descriptors(
        h6=H6(PowerLaw(1.0, -2.0, 1.0), PowerLaw(1.0, -1.0, 1.0), xloglog(p, delta)),
        h5=H5Claim(),
    )
    return Generator(
        "example2", int(k), int(d), driver, desc, p, {"p": p, "delta": delta}, infinite_horizon=True
    )


def _chen_h3(
    u_coef: float = 1.0,
    u_exp: float = 0.0,
    v_coef: float = 1.0,
    v_exp: float = 0.0,
    shift: float = 0.0,
    k: int = 1,
    d: int = 1,
    p: float = 2.0,
) -> Generator:
    u = PowerLaw(u_coef, u_exp, shift)
    v = PowerLaw(v_coef, v_exp, shift)
    unit = _unit(int(k))

    def driver(t, y, z, bt):
        return _column(u(t)) * np.sin(y) + _column(v(t) * frobenius(z)) * unit

    params = {"u_coef": u_coef, "u_exp": u_exp, "v_coef": v_coef, "v_exp": v_exp, "shift": shift}
    singular = shift == 0 and min(u_exp, v_exp) < 0
    return Generator("chenH3", int(k), int(d), driver, Descriptors(h3=H3(u, v)), p, params, singular_at_zero=singular)


@dataclass(frozen=True)
class ZooEntry:
    name: str
    builder: Callable[..., Generator]
    defaults: Dict[str, float]
    description: str


ZOO: Dict[str, ZooEntry] = {
    "zero": ZooEntry("zero", _zero, {"k": 1, "d": 1, "p": 2.0}, "g = 0"),
    "linear": ZooEntry("linear", _linear, {"a": 0.0, "b": 0.0, "c": 0.0, "p": 2.0}, "g = a*y + b*z + c (k = d = 1)"),
    "example1": ZooEntry(
        "example1",
        _example1,
        {"p": 2.0, "delta": 0.1, "k": 1, "d": 1},
        "g = h(|y|)/sqrt(t) + |z|/t^(1/4) + |B_t|, h(x) = x|ln x|^(1/p) below delta",
    ),
    "example2": ZooEntry(
        "example2",
        _example2,
        {"p": 2.0, "delta": 0.1, "k": 1, "d": 1},
        "g = sigma(|y|)/(1+t)^2 + |z|/(1+t) + 1/(1+t)^2 on [0, inf)",
    ),
    "chenH3": ZooEntry(
        "chenH3",
        _chen_h3,
        {"u_coef": 1.0, "u_exp": 0.0, "v_coef": 1.0, "v_exp": 0.0, "shift": 0.0, "k": 1, "d": 1, "p": 2.0},
        "g = u(t) sin(y) + v(t)|z|, time-dependent Lipschitz coefficients",
    ),
    "remark7": ZooEntry("remark7", _remark7, {"p": 2.0}, "g = 0 on [0, inf), paired with xi = 1"),
}

ZOO_ALIASES = {"chenh3": "chenH3", "chen": "chenH3", "lipschitz": "linear", "0": "zero"}


def normalize_zoo_name(value: Optional[str]) -> str:
    raw = str(value or "").strip()
    if raw in ZOO:
        return raw
    lowered = raw.lower()
    if lowered in ZOO:
        return lowered
    if lowered in ZOO_ALIASES:
        return ZOO_ALIASES[lowered]
    raise InvalidArgument(f"Unknown generator {value!r}; choose one of {sorted(ZOO)}.")


def zoo(name: str, params: Optional[Mapping[str, float]] = None) -> Generator:
    entry = ZOO[normalize_zoo_name(name)]
    params = dict(params or {})
    unknown = set(params) - set(entry.defaults)
    if unknown:
        raise InvalidArgument(f"{entry.name} does not take {sorted(unknown)}.")
    merged = {**entry.defaults, **params}
    for key in ("k", "d"):
        if key in merged:
            if merged[key] != int(merged[key]) or merged[key] < 1:
                raise InvalidArgument(f"{key} must be a positive integer.")
            merged[key] = int(merged[key])
    if "p" in merged and not merged["p"] > 1:
        raise InvalidArgument("p must exceed 1.")
    return entry.builder(**merged)


def describe_descriptors(desc: Descriptors) -> Dict[str, Dict[str, str]]:
    payload: Dict[str, Dict[str, str]] = {}
    if desc.h1 is not None:
        payload["H1"] = {"kappa": desc.h1.kappa.name, "c": repr(desc.h1.c)}
    if desc.h2 is not None:
        payload["H2"] = {"kappa": desc.h2.kappa.name, "c": repr(desc.h2.c)}
    if desc.h3 is not None:
        payload["H3"] = {"u": desc.h3.u.name, "v": desc.h3.v.name}
    if desc.h4 is not None:
        payload["H4"] = {"alpha": desc.h4.alpha.name, "beta": desc.h4.beta.name, "rho": desc.h4.rho.name}
    if desc.h5 is not None:
        payload["H5"] = {"note": desc.h5.note}
    if desc.h6 is not None:
        payload["H6"] = {"b": desc.h6.b.name, "c": desc.h6.c.name, "kappaBar": desc.h6.kappa_bar.name}
    if desc.h6_star is not None:
        payload["H6*"] = {"b": desc.h6_star.b.name, "c": desc.h6_star.c.name, "kappa": desc.h6_star.kappa.name}
    return payload


def zoo_catalog() -> List[dict]:
    rows = []
    for entry in ZOO.values():
        g = translate_hypotheses(entry.builder())
        rows.append(
            {
                "name": entry.name,
                "defaults": entry.defaults,
                "description": entry.description,
                "descriptors": describe_descriptors(g.descriptors),
                "infiniteHorizon": g.infinite_horizon,
            }
        )
    return rows
