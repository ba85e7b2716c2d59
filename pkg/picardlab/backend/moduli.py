from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .errors import InvalidArgument, InvalidModulus
from .modulus import ALL_CLAIMS, CONCAVE, NONDECREASING, OSGOOD, VANISHES, Modulus, power_transform


@dataclass(frozen=True)
class SpliceProfile:
    """core(x) on (0, delta], its tangent line at delta above, 0 at 0."""

    name: str
    p: float
    delta: float
    core: Callable[[np.ndarray], np.ndarray]
    slope: Callable[[np.ndarray], np.ndarray]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        inside = (x > 0) & (x <= self.delta)
        out[inside] = self.core(x[inside])
        above = x > self.delta
        at_delta = float(self.core(np.array(self.delta)))
        out[above] = float(self.slope(np.array(self.delta))) * (x[above] - self.delta) + at_delta
        return out


def _h_core(p: float) -> Tuple[Callable, Callable]:
    def core(x: np.ndarray) -> np.ndarray:
        return x * np.power(-np.log(x), 1.0 / p)

    def slope(x: np.ndarray) -> np.ndarray:
        L = -np.log(x)
        return np.power(L, 1.0 / p) - np.power(L, 1.0 / p - 1.0) / p

    return core, slope


def _sigma_core(p: float) -> Tuple[Callable, Callable]:
    def core(x: np.ndarray) -> np.ndarray:
        L = -np.log(x)
        return x * np.power(L * np.log(L), 1.0 / p)

    def slope(x: np.ndarray) -> np.ndarray:
        L = -np.log(x)
        product = L * np.log(L)
        return np.power(product, 1.0 / p - 1.0) * (product - (np.log(L) + 1.0) / p)

    return core, slope


PROFILE_CORES = {"h": (_h_core, 1.0), "sigma": (_sigma_core, math.exp(-1.0))}


@lru_cache(maxsize=64)
def delta_max(family: str, p: float) -> float:
    """Largest delta with the profile nondecreasing and concave on (0, delta]."""
    if family == "h" and p >= 1:
        return math.exp(-1.0 / p)
    builder, upper = PROFILE_CORES[family]
    _, slope = builder(p)
    xs = np.geomspace(1e-300, upper * (1.0 - 1e-9), 20_000)
    with np.errstate(invalid="ignore", divide="ignore"):
        s = slope(xs)
    good = np.isfinite(s) & (s >= 0)
    good[1:] &= np.diff(s) <= 1e-12 * np.abs(s[:-1])
    bad = np.flatnonzero(~good)
    if bad.size == 0:
        return float(xs[-1])
    if bad[0] == 0:
        return 0.0
    return float(xs[bad[0] - 1])


def splice_profile(family: str, p: float, delta: float) -> SpliceProfile:
    if family not in PROFILE_CORES:
        raise InvalidArgument(f"Unknown profile family {family!r}.")
    if not p > 0:
        raise InvalidArgument("p must be positive.")
    limit = delta_max(family, p)
    if not 0 < delta <= limit:
        raise InvalidArgument(f"delta must lie in (0, {limit!r}] for the {family} profile with p={p!r}.")
    core, slope = PROFILE_CORES[family][0](p)
    return SpliceProfile(family, p, delta, core, slope)


def linear(c: float = 1.0) -> Modulus:
    if c < 0:
        raise InvalidArgument("linear(c) needs c >= 0.")
    return Modulus(lambda u: c * u, f"linear({c!r})", ALL_CLAIMS | ({OSGOOD} if c > 0 else set()), c > 0 or None, (("c", c),))


def power(theta: float = 0.5) -> Modulus:
    if not 0 < theta <= 1:
        raise InvalidArgument("power(theta) needs 0 < theta <= 1.")
    osgood = theta == 1
    claims = ALL_CLAIMS | ({OSGOOD} if osgood else set())
    return Modulus(lambda u: np.power(u, theta), f"power({theta!r})", claims, osgood, (("theta", theta),))


def _profile_modulus(family: str, p: float, delta: float) -> Modulus:
    profile = splice_profile(family, p, delta)
    base = Modulus(profile, f"{family}(p={p!r},delta={delta!r})", ALL_CLAIMS | {OSGOOD}, True)
    bar = power_transform(base, p)
    # near 0 the transform behaves like u|ln u| (resp. u|ln u| ln|ln u|), both divergent
    return Modulus(
        bar.func,
        f"{'xlogx' if family == 'h' else 'xloglog'}(p={p!r},delta={delta!r})",
        ALL_CLAIMS | {OSGOOD},
        True,
        (("p", p), ("delta", delta)),
    )


def xlogx(p: float = 2.0, delta: float = 0.1) -> Modulus:
    return _profile_modulus("h", p, delta)


def xloglog(p: float = 2.0, delta: float = 0.1) -> Modulus:
    return _profile_modulus("sigma", p, delta)


def table(points: Sequence[Sequence[float]]) -> Modulus:
    """Piecewise-linear modulus through (u, kappa) points, extended with the last slope."""
    pts = np.array(sorted((float(u), float(k)) for u, k in points))
    if pts.ndim != 2 or pts.shape[0] < 1 or pts.shape[1] != 2:
        raise InvalidArgument("table(points) needs a list of [u, kappa] pairs.")
    if pts[0, 0] > 0:
        pts = np.vstack(([0.0, 0.0], pts))
    if pts[0, 0] < 0 or np.any(pts[:, 1] < 0):
        raise InvalidModulus("table moduli live on u >= 0 with nonnegative values.")
    if np.any(np.diff(pts[:, 0]) <= 0):
        raise InvalidModulus("table abscissae must be distinct.")
    slopes = np.diff(pts[:, 1]) / np.diff(pts[:, 0])
    if np.any(slopes < 0):
        raise InvalidModulus("table moduli must be nondecreasing.")
    us, ks = pts[:, 0], pts[:, 1]
    last = float(slopes[-1]) if slopes.size else 0.0

    def evaluate(u: np.ndarray) -> np.ndarray:
        return np.where(u > us[-1], ks[-1] + last * (u - us[-1]), np.interp(u, us, ks))

    claims = {NONDECREASING}
    if np.all(np.diff(slopes) <= 0):
        claims.add(CONCAVE)
    if ks[0] == 0:
        claims.add(VANISHES)
    known = bool(slopes[0] > 0) if slopes.size and ks[0] == 0 else None
    if known:
        claims.add(OSGOOD)
    return Modulus(evaluate, f"table({len(us)} points)", frozenset(claims), known, (("points", pts.tolist()),))


@dataclass(frozen=True)
class ModulusFamily:
    name: str
    builder: Callable[..., Modulus]
    defaults: Dict[str, object]
    description: str


MODULUS_FAMILIES: Dict[str, ModulusFamily] = {
    "linear": ModulusFamily("linear", linear, {"c": 1.0}, "c*u"),
    "power": ModulusFamily("power", power, {"theta": 0.5}, "u^theta, 0 < theta <= 1"),
    "xlogx": ModulusFamily("xlogx", xlogx, {"p": 2.0, "delta": 0.1}, "h^p(u^(1/p)) with h(x) = x|ln x|^(1/p)"),
    "xloglog": ModulusFamily(
        "xloglog", xloglog, {"p": 2.0, "delta": 0.1}, "sigma^p(u^(1/p)) with sigma(x) = x(|ln x| ln|ln x|)^(1/p)"
    ),
    "table": ModulusFamily("table", table, {"points": [[1.0, 1.0]]}, "piecewise linear through given points"),
}

MODULUS_ALIASES = {
    "lipschitz": "linear",
    "holder": "power",
    "ulogu": "xlogx",
    "piecewise": "table",
}


def normalize_modulus_name(value: Optional[str]) -> str:
    raw = str(value or "").strip().lower()
    if raw in MODULUS_FAMILIES:
        return raw
    if raw in MODULUS_ALIASES:
        return MODULUS_ALIASES[raw]
    raise InvalidArgument(f"Unknown modulus {value!r}; choose one of {sorted(MODULUS_FAMILIES)}.")


def make_modulus(name: str, params: Optional[Mapping[str, object]] = None) -> Modulus:
    family = MODULUS_FAMILIES[normalize_modulus_name(name)]
    merged = {**family.defaults, **(params or {})}
    unknown = set(merged) - set(family.defaults)
    if unknown:
        raise InvalidArgument(f"{family.name} does not take {sorted(unknown)}.")
    return family.builder(**merged)


def public_modulus_payload() -> List[dict]:
    return [
        {"name": family.name, "defaults": family.defaults, "description": family.description}
        for family in MODULUS_FAMILIES.values()
    ]
